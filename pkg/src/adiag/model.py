"""Dense GraphSAGE + differentiable pooling classifier.

Pipeline for an N-node graph, where each pool keeps round(n/4) clusters
(halves rounded up, at least one)::

    sage1 -> bn1 -> pool1 -> sage2 -> bn2 -> pool2 -> sage3 -> bn3 -> pool3
          -> flatten [C3*hidden] -> fc1 (relu) -> fc2 -> logit

At N = 1162 the node counts are 1162 -> 291 -> 73 -> 18.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    InconsistentFileError,
    TruncatedFileError,
)
from .graph import BrainGraph

POOL_RATIO = 4
ACTIVATIONS = ("sigmoid", "relu")
AGGREGATORS = ("weighted", "mean")


def next_cluster_count(n: int) -> int:
    """Clusters kept by one pool: n/4 rounded to nearest, halves up, at least 1."""
    return max(1, (2 * n + POOL_RATIO) // (2 * POOL_RATIO))


def cluster_schedule(n: int, levels: int = 3) -> list[int]:
    out = []
    for _ in range(levels):
        n = next_cluster_count(n)
        out.append(n)
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class SageLayer:
    """One dense GraphSAGE convolution.

    Each node's neighbourhood representation is the mean of its neighbours'
    features, weighted by the adjacency row (``aggregator="weighted"``) or
    uniform over nonzero entries (``"mean"``). It is concatenated with the
    node's own features and passed through a linear map and the activation.
    ``activation=None`` leaves the output linear (used for assignment logits).
    """

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator,
                 activation: str | None = "sigmoid", aggregator: str = "weighted",
                 name: str = "sage"):
        if activation is not None and activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
        self.f_in, self.f_out = f_in, f_out
        self.activation = activation
        self.aggregator = aggregator
        self.weight = Tensor(_glorot(rng, 2 * f_in, f_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(f_out), requires_grad=True, name=f"{name}.bias")

    @property
    def use_edge_weights(self) -> bool:
        return self.aggregator == "weighted"

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def aggregate(self, X: Tensor, A: Tensor) -> Tensor:
        if self.use_edge_weights:
            P = ad.row_normalize(A)
        else:
            P = ad.row_normalize(Tensor((A.data != 0).astype(np.float64)))
        return P @ X

    def __call__(self, X: Tensor, A: Tensor) -> Tensor:
        n = X.shape[0]
        if X.ndim != 2 or X.shape[1] != self.f_in:
            raise DimensionError(f"{self.weight.name}: expected [N, {self.f_in}] features, got {X.shape}")
        if A.shape != (n, n):
            raise DimensionError(f"{self.weight.name}: adjacency {A.shape} does not match features {X.shape}")
        h = ad.concat_cols(X, self.aggregate(X, A)) @ self.weight + self.bias
        return h if self.activation is None else ad.activation(h, self.activation)


class PoolBlock:
    """Soft-cluster N nodes into C clusters.

    Returns coarsened features S^T Z, coarsened adjacency S^T A S, and the
    row-softmaxed assignment S, where Z is the embedding layer's output.
    """

    def __init__(self, f_in: int, f_out: int, clusters: int, rng: np.random.Generator,
                 activation: str = "sigmoid", aggregator: str = "weighted", name: str = "pool"):
        self.clusters = clusters
        self.embed = SageLayer(f_in, f_out, rng, activation, aggregator, name=f"{name}.embed")
        self.assign = SageLayer(f_in, clusters, rng, None, aggregator, name=f"{name}.assign")

    def parameters(self) -> list[Tensor]:
        return self.embed.parameters() + self.assign.parameters()

    def __call__(self, X: Tensor, A: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n = X.shape[0]
        if self.clusters > n or (self.clusters == n and n > 1):
            raise ConfigError(f"cannot pool {n} nodes into {self.clusters} clusters")
        Z = self.embed(X, A)
        S = ad.softmax_rows(self.assign(X, A))
        St = S.T
        return St @ Z, St @ A @ S, S


class BatchNorm:
    def __init__(self, features: int, name: str, momentum: float | None = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta")
        self.state = BatchNormState.fresh(features, momentum, eps)
        self.name = name

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
        return ad.batchnorm_nodes(x, self.gamma, self.beta, self.state, mode, update_stats)


class Linear:
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, name: str):
        self.weight = Tensor(_glorot(rng, f_in, f_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(f_out), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, v: Tensor) -> Tensor:
        return ad.reshape(v, (1, v.size)) @ self.weight + self.bias


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int = 1162
    in_features: int = 3
    hidden: int = 64
    fc_hidden: int = 64
    activation: str = "sigmoid"
    aggregator: str = "weighted"
    use_batchnorm: bool = True
    levels: int = 3

    def __post_init__(self):
        if self.n_nodes < 1 or self.in_features < 1 or self.hidden < 1 or self.fc_hidden < 1:
            raise ConfigError("model sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.levels < 1:
            raise ConfigError("need at least one pooling level")

    @property
    def clusters(self) -> list[int]:
        return cluster_schedule(self.n_nodes, self.levels)


@dataclass
class ForwardResult:
    logit: Tensor
    trace: list[tuple[int, ...]] = field(default_factory=list)
    assignments: list[Tensor] = field(default_factory=list)
    pool_inputs: list[Tensor] = field(default_factory=list)
    pooled_adjacency: list[Tensor] = field(default_factory=list)

    @property
    def node_counts(self) -> list[int]:
        counts = [self.assignments[0].shape[0]] if self.assignments else []
        return counts + [s.shape[1] for s in self.assignments]


class AdiagModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 bn_momentum: float | None = 0.1, **overrides):
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            raise TypeError("pass either a ModelConfig or keyword overrides, not both")
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAD1A6]))
        c = config
        act, agg = c.activation, c.aggregator
        self.sages: list[SageLayer] = []
        self.norms: list[BatchNorm] = []
        self.pools: list[PoolBlock] = []
        f_in = c.in_features
        for level, clusters in enumerate(c.clusters, start=1):
            self.sages.append(SageLayer(f_in, c.hidden, rng, act, agg, name=f"sage{level}"))
            self.norms.append(BatchNorm(c.hidden, f"bn{level}", momentum=bn_momentum))
            self.pools.append(PoolBlock(c.hidden, c.hidden, clusters, rng, act, agg, name=f"pool{level}"))
            f_in = c.hidden
        self.fc1 = Linear(c.clusters[-1] * c.hidden, c.fc_hidden, rng, "fc1")
        self.fc2 = Linear(c.fc_hidden, 1, rng, "fc2")

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for level in range(self.config.levels):
            params += self.sages[level].parameters()
            if self.config.use_batchnorm:
                params += self.norms[level].parameters()
            params += self.pools[level].parameters()
        return params + self.fc1.parameters() + self.fc2.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.config.use_batchnorm:
            return {}
        out = {}
        for bn in self.norms:
            out[f"{bn.name}.running_mean"] = bn.state.running_mean
            out[f"{bn.name}.running_var"] = bn.state.running_var
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def reset_running_stats(self) -> None:
        for bn in self.norms:
            bn.state.reset()

    def set_bn_momentum(self, momentum: float | None) -> None:
        for bn in self.norms:
            bn.state.momentum = momentum
            bn.state.reset()

    # ------------------------------------------------------------ forward

    def forward(self, g: BrainGraph, mode: str = "eval", update_stats: bool = True) -> ForwardResult:
        return self.forward_batch([g], mode, update_stats)[0]

    def forward_batch(self, graphs, mode: str = "eval", update_stats: bool = True) -> list[ForwardResult]:
        for g in graphs:
            if g.n_nodes != self.config.n_nodes:
                raise DimensionError(
                    f"graph has {g.n_nodes} nodes, model expects {self.config.n_nodes}"
                )
        return self.forward_many([(g.x, g.W) for g in graphs], mode, update_stats)

    def forward_arrays(self, x: np.ndarray, W: np.ndarray, mode: str = "eval",
                       update_stats: bool = True) -> ForwardResult:
        return self.forward_many([(x, W)], mode, update_stats)[0]

    def forward_many(self, inputs, mode: str = "eval", update_stats: bool = True) -> list[ForwardResult]:
        """Run several graphs through the network level by level.

        Every layer sees one graph at a time except batch norm, whose
        train-mode statistics are taken over the stacked nodes of all graphs.
        Eval mode uses running statistics, so graphs do not interact.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        n, f = self.config.n_nodes, self.config.in_features
        Xs, As = [], []
        for x, W in inputs:
            if np.shape(x) != (n, f):
                raise DimensionError(f"features {np.shape(x)} do not match model input ({n}, {f})")
            if np.shape(W) != (n, n):
                raise DimensionError(f"adjacency {np.shape(W)} does not match {n} nodes")
            Xs.append(Tensor(standardize_columns(x)))
            As.append(Tensor(W))
        results = [ForwardResult(logit=None) for _ in Xs]  # type: ignore[arg-type]
        for level in range(self.config.levels):
            hs = [self.sages[level](X, A) for X, A in zip(Xs, As)]
            if self.config.use_batchnorm:
                hs = self._normalize(level, hs, mode, update_stats)
            for k, (h, A) in enumerate(zip(hs, As)):
                res = results[k]
                res.trace.append(h.shape)
                res.pool_inputs.append(A)
                Xs[k], As[k], S = self.pools[level](h, A)
                res.trace.append(Xs[k].shape)
                res.assignments.append(S)
                res.pooled_adjacency.append(As[k])
        for X, res in zip(Xs, results):
            flat = ad.flatten(X)
            res.trace.append(flat.shape)
            hidden = ad.relu(self.fc1(flat))
            res.trace.append((hidden.size,))
            logit = self.fc2(hidden)
            res.trace.append((logit.size,))
            res.logit = ad.reshape(logit, ())
        return results

    def _normalize(self, level: int, hs: list[Tensor], mode: str, update_stats: bool) -> list[Tensor]:
        bn = self.norms[level]
        if mode == "eval":
            return [bn(h, mode) for h in hs]
        if update_stats:
            # per-graph moments: running stats must not depend on batch grouping
            for h in hs:
                bn.state.observe(h.data.mean(axis=0), h.data.var(axis=0))
        if len(hs) == 1:
            return [bn(hs[0], mode, update_stats=False)]
        stacked = bn(ad.concat_rows(hs), mode, update_stats=False)
        out, lo = [], 0
        for h in hs:
            out.append(ad.slice_rows(stacked, lo, lo + h.shape[0]))
            lo += h.shape[0]
        return out

    def __call__(self, g: BrainGraph, mode: str = "eval") -> Tensor:
        return self.forward(g, mode).logit

    def logit(self, g: BrainGraph) -> float:
        with ad.no_grad():
            return self.forward(g, "eval").logit.item()


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Z-score each feature column over the nodes; constant columns map to zero."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - mean) / std


def predict(logit: float) -> int:
    """AD positive (1) iff sigmoid(logit) >= 0.5; a zero logit counts as positive."""
    if not math.isfinite(logit):
        raise ValueError(f"logit must be finite, got {logit}")
    return 1 if logit >= 0.0 else 0


def probability(logit: float) -> float:
    return float(ad._sigmoid_np(np.array([float(logit)]))[0])


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic b"ADCK", version u32
#   config: n_nodes u32, in_features u32, hidden u32, fc_hidden u32, levels u32,
#           clusters u32 x levels, activation u8, aggregator u8, use_batchnorm u8
#   tensor count u32, then per tensor:
#           name_len u16, name (UTF-8), rank u8, dims u32 x rank, float64 data

CKPT_MAGIC = b"ADCK"
CKPT_VERSION = 1


def checkpoint_to_bytes(model: AdiagModel) -> bytes:
    c = model.config
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack("<5I", c.n_nodes, c.in_features, c.hidden, c.fc_hidden, c.levels),
        struct.pack(f"<{c.levels}I", *c.clusters),
        struct.pack("<3B", ACTIVATIONS.index(c.activation), AGGREGATORS.index(c.aggregator),
                    int(c.use_batchnorm)),
    ]
    tensors = [(p.name, p.data) for p in model.parameters()] + list(model.buffers().items())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.off}")
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out


def checkpoint_from_bytes(buf: bytes) -> AdiagModel:
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.raw(4)
    (version,) = r.take("<I")
    if version != CKPT_VERSION:
        raise InconsistentFileError(f"unsupported checkpoint version {version}")
    n_nodes, in_features, hidden, fc_hidden, levels = r.take("<5I")
    if levels < 1 or levels > 64:
        raise InconsistentFileError(f"implausible level count {levels}")
    clusters = list(r.take(f"<{levels}I"))
    act_i, agg_i, use_bn = r.take("<3B")
    if act_i >= len(ACTIVATIONS) or agg_i >= len(AGGREGATORS) or use_bn > 1:
        raise InconsistentFileError("unknown activation/aggregator code in checkpoint")
    try:
        config = ModelConfig(n_nodes, in_features, hidden, fc_hidden,
                             ACTIVATIONS[act_i], AGGREGATORS[agg_i], bool(use_bn), levels)
    except ConfigError as exc:
        raise InconsistentFileError(f"invalid config block: {exc}") from None
    if config.clusters != clusters:
        raise InconsistentFileError(f"cluster sizes {clusters} inconsistent with N={n_nodes}")
    model = AdiagModel(config)
    params = model.named_parameters()
    buffers = {}
    if config.use_batchnorm:
        for bn in model.norms:
            buffers[f"{bn.name}.running_mean"] = (bn.state, "running_mean")
            buffers[f"{bn.name}.running_var"] = (bn.state, "running_var")
    (count,) = r.take("<I")
    if count != len(params) + len(buffers):
        raise InconsistentFileError(f"checkpoint holds {count} tensors, model needs {len(params) + len(buffers)}")
    seen = set()
    for _ in range(count):
        (name_len,) = r.take("<H")
        try:
            name = r.raw(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise InconsistentFileError("tensor name is not UTF-8") from None
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.raw(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in seen:
            raise InconsistentFileError(f"duplicate tensor {name!r}")
        seen.add(name)
        if name in params:
            if params[name].shape != tuple(dims):
                raise InconsistentFileError(
                    f"tensor {name!r} has shape {tuple(dims)}, expected {params[name].shape}"
                )
            params[name].data = data
            params[name].zero_grad()
        elif name in buffers:
            state, attr = buffers[name]
            if getattr(state, attr).shape != tuple(dims):
                raise InconsistentFileError(f"buffer {name!r} has wrong shape {tuple(dims)}")
            setattr(state, attr, data)
        else:
            raise InconsistentFileError(f"unexpected tensor {name!r}")
    if r.off != len(buf):
        raise InconsistentFileError(f"{len(buf) - r.off} trailing bytes after checkpoint")
    return model


def save_checkpoint(model: AdiagModel, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model))


def load_checkpoint(path) -> AdiagModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
