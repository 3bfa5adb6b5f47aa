"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are recorded whenever at
least one input requires a gradient. ``tape.backward(loss)`` replays the
recorded backward rules in reverse order. The tape is not consumed, so the
same forward computation can be differentiated more than once.

Backward rules are looked up by operation name in :data:`BACKWARD_RULES` at
replay time; tests patch that table to inject faults.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "adiag_active_tape", default=None
)


class Tensor:
    """A dense real array that may take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs: skip the defensive copy
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered log of differentiable operations."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
        return backward(loss, self, accumulate=accumulate)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], ctx: dict | None = None) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.records.append(Record(op, tuple(inputs), result, ctx or {}))
    return result


def backward(loss: Tensor, tape: Tape, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` through every record on ``tape``.

    Returns a mapping from each leaf tensor that requires a gradient (and is
    reachable from ``loss``) to d(loss)/d(leaf). With ``accumulate`` the
    gradients are also added into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        in_grads = BACKWARD_RULES[rec.op](rec, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
        out[t] = g
        if accumulate:
            t.grad = g.copy() if t.grad is None else t.grad + g
    return out


# ---------------------------------------------------------------- helpers

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _require_2d(t: Tensor, opname: str) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{opname}: expected a matrix, got shape {t.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _emit("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _emit("matmul", a.data @ b.data, (a, b))


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose")
    return _emit("transpose", a.data.T, (a,))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", np.asarray(a.data.sum()), (a,))


def mean_all(a: Tensor) -> Tensor:
    return _emit("mean", np.asarray(a.data.mean()), (a,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit("reshape", out, (a,))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), {"out": out})


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), {"out": out})


# ---------------------------------------------------------------- nonlinearities

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", out, (a,), {"out": out})


def relu(a: Tensor) -> Tensor:
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"sigmoid": sigmoid, "relu": relu}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(a)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    _require_2d(m, "softmax_rows")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax_rows", out, (m,), {"out": out})


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "concat_cols")
    _require_2d(b, "concat_cols")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat_cols", out, (a, b), {"split": a.shape[1]})


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices with equal column counts on top of each other."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat_rows")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ, {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _emit("concat_rows", out, tuple(parts), {"bounds": bounds})


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    _require_2d(a, "slice_rows")
    if not 0 <= lo <= hi <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{lo}:{hi}] out of range for shape {a.shape}")
    return _emit("slice_rows", a.data[lo:hi], (a,), {"lo": lo, "hi": hi})


def row_normalize(a: Tensor) -> Tensor:
    """Scale every row of a nonnegative matrix to sum to one.

    Rows summing to zero map to zero rows.
    """
    _require_2d(a, "row_normalize")
    s = a.data.sum(axis=1, keepdims=True)
    nz = s > 0
    # divide rather than multiply by 1/s: a subnormal row sum would overflow the reciprocal
    out = np.divide(a.data, s, out=np.zeros_like(a.data), where=nz)
    return _emit("row_normalize", out, (a,), {"out": out, "s": s, "nz": nz})


def frobenius(a: Tensor) -> Tensor:
    norm = float(np.sqrt(np.sum(a.data * a.data)))
    return _emit("frobenius", np.asarray(norm), (a,), {"norm": norm})


def row_entropy_mean(p: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the rows of a stochastic matrix."""
    _require_2d(p, "row_entropy_mean")
    safe = np.where(p.data > 0, p.data, 1.0)
    h = -(p.data * np.log(safe)).sum(axis=1)
    return _emit("row_entropy_mean", np.asarray(h.mean()), (p,))


def bce_with_logits(logit: Tensor, target: float) -> Tensor:
    """Binary cross-entropy of a sigmoid output, in the overflow-free logit form."""
    if logit.size != 1:
        raise ContractError(f"bce_with_logits expects a scalar logit, got shape {logit.shape}")
    z = float(logit.data.reshape(()))
    y = float(target)
    loss = max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))
    return _emit("bce", np.asarray(loss), (logit,), {"z": z, "y": y})


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    ``momentum=None`` switches from an exponential moving average to an
    exact cumulative average over all observations since the last
    :meth:`reset`.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float | None = 0.1
    eps: float = 1e-5
    _means: list = field(default_factory=list, repr=False)
    _vars: list = field(default_factory=list, repr=False)

    @classmethod
    def fresh(cls, features: int, momentum: float | None = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features), momentum, eps)

    def observe(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.momentum is None:
            self._means.append(mean.copy())
            self._vars.append(var.copy())
            self.running_mean = _exact_column_mean(self._means)
            # pooled variance: mean within-batch variance plus variance of batch means
            spread = [(m - self.running_mean) ** 2 for m in self._means]
            self.running_var = _exact_column_mean(self._vars) + _exact_column_mean(spread)
        else:
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var

    def reset(self) -> None:
        self._means.clear()
        self._vars.clear()


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def _exact_column_mean(rows: list[np.ndarray]) -> np.ndarray:
    # fsum makes the result independent of observation order
    stacked = np.stack(rows)
    return np.array([math.fsum(col) / len(rows) for col in stacked.T])


def batchnorm_nodes(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """Normalise each feature column over the node axis, then scale and shift."""
    _require_2d(x, "batchnorm_nodes")
    n, f = x.shape
    if n < 1:
        raise ContractError("batchnorm_nodes needs at least one node")
    if gamma.shape != (f,) or beta.shape != (f,):
        raise DimensionError(
            f"batchnorm_nodes: input {x.shape} needs scale/shift of shape ({f},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    if mode == "train":
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_stats:
            state.observe(mean, var)
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ContractError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    return _emit(
        "batchnorm",
        out,
        (x, gamma, beta),
        {"xhat": xhat, "inv_std": inv_std, "train": mode == "train"},
    )


# ---------------------------------------------------------------- backward rules

def _bw_add(rec, g):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(rec, g):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(rec, g):
    a, b = rec.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_neg(rec, g):
    return (-g,)


def _bw_matmul(rec, g):
    a, b = rec.inputs
    da = g @ b.data.T if a.requires_grad else None
    db = a.data.T @ g if b.requires_grad else None
    return da, db


def _bw_transpose(rec, g):
    return (g.T,)


def _bw_sum(rec, g):
    return (np.broadcast_to(g, rec.inputs[0].shape).copy(),)


def _bw_mean(rec, g):
    a = rec.inputs[0]
    return (np.full(a.shape, _scalar(g) / a.size),)


def _bw_reshape(rec, g):
    return (g.reshape(rec.inputs[0].shape),)


def _bw_exp(rec, g):
    return (g * rec.ctx["out"],)


def _bw_log(rec, g):
    return (g / rec.inputs[0].data,)


def _bw_sqrt(rec, g):
    return (g * 0.5 / rec.ctx["out"],)


def _bw_sigmoid(rec, g):
    s = rec.ctx["out"]
    return (g * s * (1.0 - s),)


def _bw_relu(rec, g):
    return (g * (rec.inputs[0].data > 0),)


def _bw_softmax_rows(rec, g):
    s = rec.ctx["out"]
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def _bw_concat_cols(rec, g):
    k = rec.ctx["split"]
    return g[:, :k], g[:, k:]


def _bw_concat_rows(rec, g):
    b = rec.ctx["bounds"]
    return tuple(g[b[i]:b[i + 1]] for i in range(len(rec.inputs)))


def _bw_slice_rows(rec, g):
    out = np.zeros(rec.inputs[0].shape)
    out[rec.ctx["lo"]:rec.ctx["hi"]] = g
    return (out,)


def _bw_row_normalize(rec, g):
    out, s, nz = rec.ctx["out"], rec.ctx["s"], rec.ctx["nz"]
    num = np.broadcast_to(g - (g * out).sum(axis=1, keepdims=True), out.shape)
    return (np.divide(num, s, out=np.zeros_like(out), where=nz),)


def _bw_frobenius(rec, g):
    norm = rec.ctx["norm"]
    if norm == 0.0:
        return (np.zeros(rec.inputs[0].shape),)
    return (_scalar(g) * rec.inputs[0].data / norm,)


def _bw_row_entropy_mean(rec, g):
    p = rec.inputs[0].data
    tiny = np.finfo(np.float64).tiny
    return (-_scalar(g) * (np.log(np.maximum(p, tiny)) + 1.0) / p.shape[0],)


def _bw_bce(rec, g):
    z, y = rec.ctx["z"], rec.ctx["y"]
    p = float(_sigmoid_np(np.array([z]))[0])
    return (np.full(rec.inputs[0].shape, _scalar(g) * (p - y)),)


def _bw_batchnorm(rec, g):
    x, gamma, _ = rec.inputs
    xhat, inv_std = rec.ctx["xhat"], rec.ctx["inv_std"]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma.data
    if rec.ctx["train"]:
        n = x.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "neg": _bw_neg,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "reshape": _bw_reshape,
    "exp": _bw_exp,
    "log": _bw_log,
    "sqrt": _bw_sqrt,
    "sigmoid": _bw_sigmoid,
    "relu": _bw_relu,
    "softmax_rows": _bw_softmax_rows,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "slice_rows": _bw_slice_rows,
    "row_normalize": _bw_row_normalize,
    "frobenius": _bw_frobenius,
    "row_entropy_mean": _bw_row_entropy_mean,
    "bce": _bw_bce,
    "batchnorm": _bw_batchnorm,
}


# ---------------------------------------------------------------- finite differences

def numerical_grad(f: Callable[[], float], t: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``t.data``.

    ``t.data`` is perturbed in place and restored afterwards.
    """
    flat = t.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max-norm relative discrepancy between two gradient arrays.

    The denominator is the larger max-norm of the two arrays, clamped below by
    ``floor`` so that gradients that are identically zero compare as exact.
    """
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), floor)
    return diff / scale


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
