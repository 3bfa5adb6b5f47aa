"""Finite-difference verification of the model's tape gradients.

The finite differences are taken through :func:`reference_logits`, a plain
numpy re-implementation of the forward pass that shares no code with the
tape. Every array carries a leading batch axis, so one call evaluates the
logit for many perturbed copies of a parameter at once.
"""

from __future__ import annotations

import contextlib
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import AdiagModel, ModelConfig

FD_STEP = 1e-6
TOLERANCE = 1e-5
_CHUNK = 512
TRAIN_GRAPHS = 3


def _act(z: np.ndarray, kind: str | None) -> np.ndarray:
    if kind is None:
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sage(X, A, w, b, kind, aggregator):
    if aggregator == "mean":
        A = (A != 0).astype(np.float64)
    s = A.sum(axis=-1, keepdims=True)
    P = np.divide(A, s, out=np.zeros(np.broadcast_shapes(A.shape, s.shape)), where=s > 0)
    agg = P @ X
    X_b, agg_b = np.broadcast_arrays(X, agg)
    H = np.concatenate([X_b, agg_b], axis=-1)
    return _act(H @ w + b[..., None, :], kind)


def _level_of(name: str) -> int:
    """1-based level a parameter belongs to; the dense head counts as ``levels + 1``."""
    m = re.match(r"(?:sage|bn|pool)(\d+)\.", name)
    return int(m.group(1)) if m else 10**6


def _inputs(xs: np.ndarray, Ws: np.ndarray):
    mu = xs.mean(axis=-2, keepdims=True)
    sd = xs.std(axis=-2, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return ((xs - mu) / sd)[None], Ws[None]


def _level(X, A, params, buffers, level, config, mode, eps):
    act, agg = config.activation, config.aggregator
    p = f"sage{level}"
    h = _sage(X, A, params[f"{p}.weight"], params[f"{p}.bias"], act, agg)
    if config.use_batchnorm:
        bn = f"bn{level}"
        if mode == "train":
            # pooled over every node of every graph in the batch
            mean = h.mean(axis=(-3, -2), keepdims=True)
            var = ((h - mean) ** 2).mean(axis=(-3, -2), keepdims=True)
        else:
            mean = buffers[f"{bn}.running_mean"]
            var = buffers[f"{bn}.running_var"]
        h = (h - mean) / np.sqrt(var + eps)
        h = h * params[f"{bn}.gamma"][..., None, :] + params[f"{bn}.beta"][..., None, :]
    q = f"pool{level}"
    Z = _sage(h, A, params[f"{q}.embed.weight"], params[f"{q}.embed.bias"], act, agg)
    logits = _sage(h, A, params[f"{q}.assign.weight"], params[f"{q}.assign.bias"], None, agg)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    S = e / e.sum(axis=-1, keepdims=True)
    St = np.swapaxes(S, -1, -2)
    return St @ Z, St @ A @ S


def _head(X, params):
    flat = X.reshape(X.shape[:-2] + (1, -1))
    hidden = np.maximum(flat @ params["fc1.weight"] + params["fc1.bias"][..., None, :], 0.0)
    out = hidden @ params["fc2.weight"] + params["fc2.bias"][..., None, :]
    return out[..., 0, 0]


def _expand(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    # (B, *shape) -> (B, 1, *shape) so parameters broadcast over the graph axis
    return {k: v[:, None] for k, v in params.items()}


def reference_logits(params: dict[str, np.ndarray], buffers: dict[str, np.ndarray],
                     xs: np.ndarray, Ws: np.ndarray, config: ModelConfig, mode: str,
                     eps: float = 1e-5) -> np.ndarray:
    """Batched forward pass over G graphs for B parameter sets.

    ``xs`` is ``(G, N, F)`` and ``Ws`` is ``(G, N, N)``; a single graph may be
    passed without the leading axis. Every parameter has shape
    ``(B or 1, *shape)``. Returns logits of shape ``(B, G)``.
    """
    xs, Ws = np.asarray(xs, float), np.asarray(Ws, float)
    if xs.ndim == 2:
        xs, Ws = xs[None], Ws[None]
    P = _expand(params)
    X, A = _inputs(xs, Ws)
    for level in range(1, config.levels + 1):
        X, A = _level(X, A, P, buffers, level, config, mode, eps)
    return _head(X, P)


def fd_gradients(model: AdiagModel, xs: np.ndarray, Ws: np.ndarray, mode: str,
                 step: float = FD_STEP, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the summed batch logit w.r.t. every model parameter.

    Levels below the perturbed parameter are evaluated once and reused.
    """
    xs, Ws = np.asarray(xs, float), np.asarray(Ws, float)
    if xs.ndim == 2:
        xs, Ws = xs[None], Ws[None]
    config = model.config
    base = {name: p.data[None] for name, p in model.named_parameters().items()}
    buffers = {k: v.copy() for k, v in model.buffers().items()}
    P0 = _expand(base)
    prefix = [_inputs(xs, Ws)]  # prefix[L - 1] is the input to level L
    for level in range(1, config.levels + 1):
        prefix.append(_level(*prefix[-1], P0, buffers, level, config, mode, eps))
    out = {}
    for name, p in model.named_parameters().items():
        first = min(_level_of(name), config.levels + 1)
        flat = p.data.reshape(-1)
        grad = np.empty(flat.size)
        for lo in range(0, flat.size, _CHUNK):
            idx = np.arange(lo, min(lo + _CHUNK, flat.size))
            k = idx.size
            plus = np.repeat(flat[None], k, axis=0)
            minus = plus.copy()
            plus[np.arange(k), idx] += step
            minus[np.arange(k), idx] -= step
            P = dict(P0)
            P[name] = np.concatenate([plus, minus]).reshape((2 * k, 1) + p.shape)
            X, A = prefix[first - 1]
            for level in range(first, config.levels + 1):
                X, A = _level(X, A, P, buffers, level, config, mode, eps)
            vals = _head(X, P).sum(axis=-1)
            grad[idx] = (vals[:k] - vals[k:]) / (2.0 * step)
        out[name] = grad.reshape(p.shape)
    return out


def tape_gradients(model: AdiagModel, xs: np.ndarray, Ws: np.ndarray, mode: str) -> dict[str, np.ndarray]:
    """Tape gradient of the summed batch logit."""
    if np.ndim(xs) == 2:
        xs, Ws = [xs], [Ws]
    with ad.Tape() as tape:
        res = model.forward_many(list(zip(xs, Ws)), mode, update_stats=False)
        total = res[0].logit
        for r in res[1:]:
            total = total + r.logit
    grads = tape.backward(total, accumulate=False)
    return {p.name: grads.get(p, np.zeros(p.shape)) for p in model.parameters()}


def randomize(model: AdiagModel, rng: np.random.Generator, xs, Ws) -> None:
    """Move biases and batch-norm parameters off their symmetric initial values.

    Zero biases put relu units exactly on their kink, where one-sided
    derivatives disagree and finite differences are meaningless. Running
    statistics are set near the batch statistics of ``(xs, Ws)`` so that
    eval mode sees well-scaled activations.
    """
    if np.ndim(xs) == 2:
        xs, Ws = [xs], [Ws]
    for p in model.parameters():
        if p.name.endswith(".bias") or p.name.endswith(".beta"):
            p.data = rng.uniform(-0.5, 0.5, size=p.shape)
        elif p.name.endswith(".gamma"):
            p.data = rng.uniform(0.5, 1.5, size=p.shape)
    saved = [bn.state.momentum for bn in model.norms]
    for bn in model.norms:
        bn.state.momentum = 1.0
    with ad.no_grad():
        model.forward_many(list(zip(xs, Ws)), "train")
    for bn, m in zip(model.norms, saved):
        st = bn.state
        st.momentum = m
        st.running_mean = st.running_mean + rng.uniform(-0.1, 0.1, size=st.running_mean.shape)
        st.running_var = st.running_var * rng.uniform(0.8, 1.2, size=st.running_var.shape) + 0.05


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 1.01):
    """Temporarily scale every input gradient produced by the backward rule of ``op``."""
    if op not in ad.BACKWARD_RULES:
        raise KeyError(f"no backward rule named {op!r}")
    original = ad.BACKWARD_RULES[op]

    def faulty(rec, g):
        return tuple(None if gi is None else gi * scale for gi in original(rec, g))

    ad.BACKWARD_RULES[op] = faulty
    try:
        yield
    finally:
        ad.BACKWARD_RULES[op] = original


@dataclass
class GradcheckReport:
    seed: int
    errors: dict[tuple[str, str, str], float] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[tuple[str, str, str]]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def run_gradcheck(seed: int = 0, n_nodes: int = 16,
                  activations=("sigmoid", "relu"), modes=("train", "eval"),
                  tolerance: float = TOLERANCE, train_graphs: int = TRAIN_GRAPHS) -> GradcheckReport:
    """Compare tape and finite-difference gradients on random N-node graphs.

    Train mode differentiates the summed logit of a batch of ``train_graphs``
    graphs. With one graph, levels that pool down to a single node would
    normalize a single row to a constant and hide every gradient below them.
    Eval mode treats graphs independently, so one graph suffices there.
    """
    from .synthgen import GenConfig, build_graph, subject_seed

    start = time.perf_counter()
    report = GradcheckReport(seed, tolerance=tolerance)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6C]))
    regions = max(1, min(4, n_nodes))
    gcfg = GenConfig(nodes_target=n_nodes, vertices_per_node=5, n_regions=regions, seed=seed)
    graphs = [build_graph(gcfg, ("AD", "NC")[i % 2], subject_seed(seed, i), f"gradcheck-{i}")[0]
              for i in range(max(1, train_graphs))]
    xs = np.stack([g.x for g in graphs])
    Ws = np.stack([g.W for g in graphs])
    for act in activations:
        model = AdiagModel(ModelConfig(n_nodes=n_nodes, activation=act), seed=seed)
        randomize(model, rng, xs, Ws)
        for mode in modes:
            k = len(graphs) if mode == "train" else 1
            analytic = tape_gradients(model, xs[:k], Ws[:k], mode)
            numeric = fd_gradients(model, xs[:k], Ws[:k], mode)
            for name in analytic:
                report.errors[(act, mode, name)] = ad.relative_error(analytic[name], numeric[name])
    report.seconds = time.perf_counter() - start
    return report
