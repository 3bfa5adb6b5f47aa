"""Brain graph data object, validation, and the ADGR binary file format.

Graph file layout (little-endian)::

    magic      4 bytes  b"ADGR"
    version    u32      1
    N          u32      node count
    F          u32      feature count (always 3)
    label      u8       0 = NC, 1 = AD
    id_len     u16      byte length of subject_id
    subject_id id_len bytes of UTF-8
    x          N*F float64, row-major
    W          N*N float64, row-major

The COO edge list is not stored; it is derived from W on demand.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    InconsistentFileError,
    TruncatedFileError,
    ValidationError,
)

GRAPH_MAGIC = b"ADGR"
GRAPH_VERSION = 1
N_FEATURES = 3
MANIFEST_NAME = "manifest.txt"

_HEADER = struct.Struct("<4sIIIBH")


@dataclass(frozen=True, eq=False)
class Coo:
    """Upper-triangle edge list: parallel arrays of (row, col, weight)."""

    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return int(self.rows.size)

    def triples(self) -> Iterator[tuple[int, int, float]]:
        for i, j, w in zip(self.rows, self.cols, self.weights):
            yield int(i), int(j), float(w)


def complete_edge_count(n: int) -> int:
    return n * (n - 1) // 2


def _first_asymmetry(W: np.ndarray) -> tuple[int, int] | None:
    bad = np.argwhere(W != W.T)
    if bad.size == 0:
        return None
    for i, j in bad:
        if i < j:
            return int(i), int(j)
    i, j = bad[0]
    return int(min(i, j)), int(max(i, j))


def dense_to_coo(W: np.ndarray) -> Coo:
    """Upper-triangle edges with positive weight, ordered by (i, j)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {W.shape}")
    pair = _first_asymmetry(W)
    if pair is not None:
        i, j = pair
        raise ValidationError(f"adjacency not symmetric at ({i}, {j}): {W[i, j]!r} != {W[j, i]!r}")
    diag = np.flatnonzero(np.diag(W))
    if diag.size:
        raise ValidationError(f"nonzero diagonal at {int(diag[0])}")
    # triu_indices is already lexicographic in (i, j)
    rows, cols = np.triu_indices(W.shape[0], k=1)
    w = W[rows, cols]
    keep = w > 0
    return Coo(rows[keep].astype(np.int64), cols[keep].astype(np.int64), w[keep].copy())


def coo_to_dense(coo: Coo, n: int) -> np.ndarray:
    W = np.zeros((n, n))
    W[coo.rows, coo.cols] = coo.weights
    W[coo.cols, coo.rows] = coo.weights
    return W


def sparsify(W: np.ndarray, tau: float) -> np.ndarray:
    """Zero every edge lighter than ``tau``; ``tau <= 0`` is a no-op."""
    if tau <= 0:
        return W
    out = W.copy()
    out[out < tau] = 0.0
    return out


@dataclass(frozen=True, eq=False)
class BrainGraph:
    x: np.ndarray
    W: np.ndarray
    label: int
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float64))
        object.__setattr__(self, "W", np.ascontiguousarray(self.W, dtype=np.float64))
        self.x.flags.writeable = False
        self.W.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return int(self.W.shape[0])

    @cached_property
    def edge_index(self) -> Coo:
        return dense_to_coo(self.W)

    @property
    def n_edges(self) -> int:
        return len(self.edge_index)

    def permuted(self, perm: Sequence[int]) -> "BrainGraph":
        """Relabel nodes so that new node k is old node ``perm[k]``."""
        p = np.asarray(perm)
        return BrainGraph(self.x[p], self.W[np.ix_(p, p)], self.label, self.subject_id)

    def same_as(self, other: "BrainGraph") -> bool:
        return (
            self.label == other.label
            and self.subject_id == other.subject_id
            and self.x.shape == other.x.shape
            and self.W.shape == other.W.shape
            and self.x.tobytes() == other.x.tobytes()
            and self.W.tobytes() == other.W.tobytes()
        )


def validate(g: BrainGraph) -> list[str]:
    """Every invariant violation of ``g``; an empty list means valid."""
    problems: list[str] = []
    x, W = g.x, g.W
    if x.ndim != 2 or x.shape[1] != N_FEATURES:
        problems.append(f"node features must have {N_FEATURES} columns, got shape {x.shape}")
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        problems.append(f"adjacency must be square, got shape {W.shape}")
        square = False
    else:
        square = True
    if x.ndim == 2 and square and x.shape[0] != W.shape[0]:
        problems.append(f"node count mismatch: x has {x.shape[0]} rows, W has {W.shape[0]}")
    if not np.all(np.isfinite(x)):
        problems.append("non-finite node feature")
    if square:
        if not np.all(np.isfinite(W)):
            problems.append("non-finite edge weight")
        for i in np.flatnonzero(np.diag(W)):
            problems.append(f"nonzero diagonal at {int(i)}")
        pair = _first_asymmetry(W)
        if pair is not None:
            problems.append(f"asymmetric weight at ({pair[0]}, {pair[1]})")
        lo, hi = np.nanmin(W, initial=0.0), np.nanmax(W, initial=0.0)
        if lo < 0.0 or hi > 1.0:
            problems.append(f"edge weight outside [0, 1] (min {lo!r}, max {hi!r})")
    if g.label not in (0, 1):
        problems.append("label outside {0,1}")
    return problems


def check(g: BrainGraph) -> BrainGraph:
    problems = validate(g)
    if problems:
        raise ValidationError("; ".join(problems))
    return g


# ---------------------------------------------------------------- serialization

def graph_to_bytes(g: BrainGraph) -> bytes:
    sid = g.subject_id.encode("utf-8")
    n = g.n_nodes
    if g.x.shape != (n, N_FEATURES):
        raise ValidationError(f"node features must have shape ({n}, {N_FEATURES}), got {g.x.shape}")
    if len(sid) > 0xFFFF:
        raise ValidationError("subject_id longer than 65535 bytes")
    if g.label not in (0, 1):
        raise ValidationError("label outside {0,1}")
    head = _HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, n, N_FEATURES, g.label, len(sid))
    return b"".join([head, sid, g.x.astype("<f8").tobytes(), g.W.astype("<f8").tobytes()])


def graph_from_bytes(buf: bytes) -> BrainGraph:
    if len(buf) < 4 or buf[:4] != GRAPH_MAGIC:
        raise BadMagicError(f"not a graph file: magic {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("graph header truncated")
    _, version, n, f, label, id_len = _HEADER.unpack_from(buf, 0)
    if version != GRAPH_VERSION:
        raise InconsistentFileError(f"unsupported graph format version {version}")
    if f != N_FEATURES:
        raise InconsistentFileError(f"feature count {f} != {N_FEATURES}")
    if label > 1:
        raise InconsistentFileError(f"label byte {label} outside {{0,1}}")
    off = _HEADER.size
    expected = off + id_len + 8 * (n * f + n * n)
    if len(buf) < expected:
        raise TruncatedFileError(f"graph file truncated: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise InconsistentFileError(f"{len(buf) - expected} trailing bytes after graph payload")
    try:
        sid = bytes(buf[off:off + id_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InconsistentFileError(f"subject_id is not UTF-8: {exc}") from None
    off += id_len
    x = np.frombuffer(buf, dtype="<f8", count=n * f, offset=off).reshape(n, f)
    off += 8 * n * f
    W = np.frombuffer(buf, dtype="<f8", count=n * n, offset=off).reshape(n, n)
    return BrainGraph(x.astype(np.float64), W.astype(np.float64), int(label), sid)


def save_graph(g: BrainGraph, path) -> None:
    Path(path).write_bytes(graph_to_bytes(g))


def load_graph(path) -> BrainGraph:
    return graph_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets

@dataclass
class GraphDataset:
    graphs: list[BrainGraph]
    filenames: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.filenames:
            self.filenames = [f"graph_{i:04d}.adgr" for i in range(len(self.graphs))]
        sizes = {g.n_nodes for g in self.graphs}
        if len(sizes) > 1:
            raise ValidationError(f"graphs disagree on node count: {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.graphs[0].n_nodes if self.graphs else 0

    def counts(self) -> dict[str, int]:
        ad = int(self.labels.sum())
        return {"graphs": len(self), "ad": ad, "nc": len(self) - ad, "nodes": self.n_nodes}

    def manifest_text(self) -> str:
        c = self.counts()
        lines = [f"graphs={c['graphs']} ad={c['ad']} nc={c['nc']} nodes={c['nodes']}"]
        for name, g in zip(self.filenames, self.graphs):
            lines.append(f"{name}\t{g.subject_id}\t{g.label}")
        return "\n".join(lines) + "\n"


def save_dataset(ds: GraphDataset, directory) -> None:
    """Write graph files, then the manifest last and atomically."""
    save_graph_stream(ds.graphs, directory)


@dataclass(frozen=True)
class StreamSummary:
    graphs: int
    ad: int
    nodes: int
    edges: list[int]

    @property
    def nc(self) -> int:
        return self.graphs - self.ad


def save_graph_stream(graphs: Iterable[BrainGraph], directory) -> StreamSummary:
    """Write graphs one at a time as they are produced, then the manifest.

    Only the manifest lines are held in memory. Returns counts and the edge
    count of every graph.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines, names, edges = [], [], []
    n_ad, nodes = 0, None
    for i, g in enumerate(graphs):
        if nodes is None:
            nodes = g.n_nodes
        elif g.n_nodes != nodes:
            raise ValidationError(f"graphs disagree on node count: {nodes} and {g.n_nodes}")
        name = f"graph_{i:04d}.adgr"
        save_graph(g, d / name)
        lines.append(f"{name}\t{g.subject_id}\t{g.label}")
        names.append(name)
        edges.append(g.n_edges)
        n_ad += g.label
    header = f"graphs={len(names)} ad={n_ad} nc={len(names) - n_ad} nodes={nodes or 0}"
    tmp = d / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join([header] + lines) + "\n", encoding="utf-8")
    os.replace(tmp, d / MANIFEST_NAME)
    return StreamSummary(len(names), n_ad, nodes or 0, edges)


def load_dataset(directory) -> GraphDataset:
    d = Path(directory)
    manifest = d / MANIFEST_NAME
    if not manifest.is_file():
        raise ValidationError(f"no {MANIFEST_NAME} in {d}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError(f"empty manifest in {d}")
    try:
        header = dict(item.split("=", 1) for item in lines[0].split())
        declared = {k: int(header[k]) for k in ("graphs", "ad", "nc", "nodes")}
    except (KeyError, ValueError):
        raise ValidationError(f"malformed manifest header: {lines[0]!r}") from None
    graphs, names = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"malformed manifest line: {line!r}")
        name, sid, label = parts
        g = load_graph(d / name)
        if g.subject_id != sid or str(g.label) != label:
            raise ValidationError(f"manifest entry {name} disagrees with file contents")
        graphs.append(g)
        names.append(name)
    ds = GraphDataset(graphs, names)
    if ds.counts() != declared:
        raise ValidationError(f"manifest header {declared} does not match stored graphs {ds.counts()}")
    return ds
