"""Synthetic cortical surfaces and thickness-difference connectome graphs.

Each subject gets a sphere-like surface (~85 mm radius) tiled into
``nodes_target`` patches of ``vertices_per_node`` vertices. Consecutive
patches are grouped into ``n_regions`` regions. Thickness is a subject
mean plus a smooth spatial field, a per-region offset and per-vertex noise.
AD subjects have the thickness of a fixed block of regions multiplied by
``thinning``. Patches become graph nodes and every pair of nodes is
connected with weight ``exp(-|t_i - t_j| / sigma_t)``.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DomainError
from .graph import BrainGraph, GraphDataset, check, sparsify

NC, AD, INDETERMINATE = "NC", "AD", "indeterminate"

BRAIN_RADIUS_MM = 85.0
_PATCH_SPREAD_MM = 2.0
_POSITION_JITTER_MM = 0.5


@dataclass(frozen=True)
class GenConfig:
    nodes_target: int = 1162
    vertices_per_node: int = 250
    n_ad: int = 60
    n_nc: int = 61
    sigma_t: float = 0.5
    thinning: float = 0.85
    affected_fraction: float = 0.25
    n_regions: int = 68
    mean_thickness: float = 2.5
    subject_sd: float = 0.15
    region_sd: float = 0.05
    field_sd: float = 0.1
    vertex_sd: float = 0.1
    min_thickness: float = 0.5
    edge_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("nodes_target", "vertices_per_node", "n_regions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_ad < 0 or self.n_nc < 0 or self.n_ad + self.n_nc < 1:
            raise ConfigError(f"need a nonempty cohort, got n_ad={self.n_ad} n_nc={self.n_nc}")
        if self.n_regions > self.nodes_target:
            raise ConfigError(f"n_regions={self.n_regions} exceeds nodes_target={self.nodes_target}")
        if not 0.0 < self.thinning <= 1.0:
            raise ConfigError(f"thinning must lie in (0, 1], got {self.thinning}")
        if not 0.0 < self.affected_fraction <= 1.0:
            raise ConfigError(f"affected_fraction must lie in (0, 1], got {self.affected_fraction}")
        if self.sigma_t <= 0:
            raise ConfigError(f"sigma_t must be positive, got {self.sigma_t}")
        if self.mean_thickness <= 0 or self.min_thickness <= 0:
            raise ConfigError("thickness levels must be positive")
        for name in ("subject_sd", "region_sd", "field_sd", "vertex_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.edge_threshold <= 1.0:
            raise ConfigError(f"edge_threshold must lie in [0, 1], got {self.edge_threshold}")

    @property
    def n_vertices(self) -> int:
        return self.nodes_target * self.vertices_per_node

    @property
    def n_affected_regions(self) -> int:
        return max(1, math.ceil(self.affected_fraction * self.n_regions))

    @classmethod
    def desk(cls, **overrides) -> "GenConfig":
        """Small preset for CI: 40 subjects of 128 nodes."""
        base = dict(nodes_target=128, vertices_per_node=50, n_ad=20, n_nc=20, n_regions=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class SubjectMeta:
    cdr: float
    mmse: int
    group: str


@dataclass(eq=False)
class SurfaceModel:
    positions: np.ndarray
    thickness: np.ndarray
    region_id: np.ndarray
    meta: SubjectMeta
    subject_id: str = ""
    affected_regions: frozenset = field(default_factory=frozenset)

    @property
    def n_vertices(self) -> int:
        return int(self.thickness.size)


def assign_group(cdr: float, mmse: int) -> str:
    """Cohort of a subject from clinical dementia rating and MMSE score.

    NC needs CDR 0 with MMSE 25-30; AD needs CDR >= 0.5 with MMSE <= 24.
    Anything else is indeterminate.
    """
    if not (cdr >= 0 and math.isfinite(cdr)):
        raise DomainError(f"CDR must be a finite nonnegative value, got {cdr}")
    if not (0 <= mmse <= 30) or int(mmse) != mmse:
        raise DomainError(f"MMSE must be an integer in 0..30, got {mmse}")
    if cdr == 0 and 25 <= mmse <= 30:
        return NC
    if cdr >= 0.5 and mmse <= 24:
        return AD
    return INDETERMINATE


def subject_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & (2**64 - 1), int(index)])


def _sample_meta(group: str, rng: np.random.Generator) -> SubjectMeta:
    if group == NC:
        cdr, mmse = 0.0, int(rng.integers(25, 31))
    elif group == AD:
        cdr = float(rng.choice([0.5, 1.0, 2.0, 3.0], p=[0.5, 0.3, 0.15, 0.05]))
        mmse = int(rng.integers(10, 25))
    else:
        raise DomainError(f"group must be {NC!r} or {AD!r}, got {group!r}")
    return SubjectMeta(cdr, mmse, assign_group(cdr, mmse))


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _region_of_patch(cfg: GenConfig) -> np.ndarray:
    # contiguous, near-equal blocks of patches
    return (np.arange(cfg.nodes_target) * cfg.n_regions) // cfg.nodes_target


def generate_surface(cfg: GenConfig, group: str, seed, subject_id: str = "") -> SurfaceModel:
    """Synthesize one subject's surface.

    Thickness draws do not depend on ``group``, so with ``thinning == 1`` an
    AD and an NC surface from the same seed have identical vertices.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    geo_ss, thick_ss, meta_ss = ss.spawn(3)
    geo = np.random.default_rng(geo_ss)
    rng = np.random.default_rng(thick_ss)
    meta = _sample_meta(group, np.random.default_rng(meta_ss))

    P, V = cfg.nodes_target, cfg.vertices_per_node
    centers = _fibonacci_sphere(P)
    # tangent-plane scatter around each patch center
    offsets = geo.normal(0.0, _PATCH_SPREAD_MM / BRAIN_RADIUS_MM, size=(P, V, 3))
    unit = centers[:, None, :] + offsets
    unit /= np.linalg.norm(unit, axis=2, keepdims=True)
    positions = BRAIN_RADIUS_MM * unit.reshape(P * V, 3)
    positions += geo.normal(0.0, _POSITION_JITTER_MM, size=positions.shape)

    patch_region = _region_of_patch(cfg)
    region_id = np.repeat(patch_region, V)

    subject_mean = cfg.mean_thickness + cfg.subject_sd * rng.standard_normal()
    gradient = cfg.field_sd * rng.standard_normal(3)
    region_offset = cfg.region_sd * rng.standard_normal(cfg.n_regions)
    noise = cfg.vertex_sd * rng.standard_normal(P * V)
    smooth = (positions / BRAIN_RADIUS_MM) @ gradient
    thickness = subject_mean + smooth + region_offset[region_id] + noise
    thickness = np.maximum(thickness, cfg.min_thickness)

    affected = frozenset(range(cfg.n_affected_regions))
    if group == AD and cfg.thinning != 1.0:
        mask = region_id < cfg.n_affected_regions
        thickness = np.where(mask, thickness * cfg.thinning, thickness)
    return SurfaceModel(positions, thickness, region_id, meta, subject_id, affected)


def aggregate_patches(s: SurfaceModel, cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Collapse runs of ``vertices_per_node`` region-sorted vertices into nodes.

    Returns (centroids [nodes_target, 3], mean thickness [nodes_target]).
    """
    V = cfg.vertices_per_node
    n = s.n_vertices
    if n % V != 0:
        raise ConfigError(f"{n} vertices cannot be split into patches of {V}")
    if n // V != cfg.nodes_target:
        raise ConfigError(f"{n} vertices give {n // V} patches, expected {cfg.nodes_target}")
    order = np.argsort(s.region_id, kind="stable")
    pos = s.positions[order].reshape(-1, V, 3)
    thick = s.thickness[order].reshape(-1, V)
    return pos.mean(axis=1), thick.mean(axis=1)


def edge_weights(thickness: np.ndarray, sigma_t: float) -> np.ndarray:
    """Complete weighted adjacency ``exp(-|t_i - t_j| / sigma_t)`` with zero diagonal."""
    if not sigma_t > 0:
        raise ConfigError(f"sigma_t must be positive, got {sigma_t}")
    t = np.asarray(thickness, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("node thickness must be positive")
    W = np.exp(-np.abs(t[:, None] - t[None, :]) / sigma_t)
    np.fill_diagonal(W, 0.0)
    return W


def build_graph(cfg: GenConfig, group: str, seed, subject_id: str) -> tuple[BrainGraph, SurfaceModel]:
    surf = generate_surface(cfg, group, seed, subject_id)
    centroids, node_t = aggregate_patches(surf, cfg)
    W = sparsify(edge_weights(node_t, cfg.sigma_t), cfg.edge_threshold)
    g = BrainGraph(centroids, W, 1 if group == AD else 0, subject_id)
    return check(g), surf


def cohort_groups(cfg: GenConfig) -> list[str]:
    """Group of each subject index; AD and NC interleaved so any prefix is balanced."""
    groups = []
    ad_left, nc_left = cfg.n_ad, cfg.n_nc
    while ad_left or nc_left:
        if ad_left and (ad_left >= nc_left or not nc_left):
            groups.append(AD)
            ad_left -= 1
        if nc_left:
            groups.append(NC)
            nc_left -= 1
    return groups


def iter_cohort(cfg: GenConfig) -> Iterator[BrainGraph]:
    """Yield the cohort's graphs one at a time (subject ``i`` is ``sub-{i:04d}``)."""
    for i, group in enumerate(cohort_groups(cfg)):
        g, _ = build_graph(cfg, group, subject_seed(cfg.seed, i), f"sub-{i:04d}")
        yield g


def generate_dataset(cfg: GenConfig) -> GraphDataset:
    return GraphDataset(list(iter_cohort(cfg)))


def with_overrides(cfg: GenConfig, **kw) -> GenConfig:
    return replace(cfg, **kw)
