import math

import numpy as np
import pytest

from adiag.errors import ConfigError, DomainError
from adiag.graph import graph_to_bytes
from adiag.synthgen import (
    AD,
    INDETERMINATE,
    NC,
    GenConfig,
    SubjectMeta,
    SurfaceModel,
    aggregate_patches,
    assign_group,
    build_graph,
    cohort_groups,
    edge_weights,
    generate_dataset,
    generate_surface,
    subject_seed,
)

SMALL = GenConfig(nodes_target=32, vertices_per_node=10, n_ad=4, n_nc=4, n_regions=8)


# ---------------------------------------------------------------- cohort rules

@pytest.mark.parametrize("cdr, mmse, group", [
    (0, 28, NC), (1.0, 20, AD), (0, 22, INDETERMINATE),
    (0, 25, NC), (0.5, 24, AD), (0.5, 25, INDETERMINATE), (0, 30, NC),
])
def test_assign_group(cdr, mmse, group):
    assert assign_group(cdr, mmse) == group


@pytest.mark.parametrize("cdr, mmse", [(-0.5, 20), (math.nan, 20), (0, 31), (0, -1), (0, 20.5)])
def test_assign_group_domain(cdr, mmse):
    with pytest.raises(DomainError):
        assign_group(cdr, mmse)


def test_generated_metadata_is_never_indeterminate():
    for i in range(30):
        for group in (AD, NC):
            s = generate_surface(SMALL, group, subject_seed(0, i))
            assert s.meta.group == group


# ---------------------------------------------------------------- surfaces

def test_same_seed_same_surface():
    a = generate_surface(SMALL, AD, subject_seed(5, 1))
    b = generate_surface(SMALL, AD, subject_seed(5, 1))
    assert a.thickness.tobytes() == b.thickness.tobytes()
    assert a.positions.tobytes() == b.positions.tobytes()


def test_no_signal_limit_identical_surfaces():
    cfg = GenConfig(**{**SMALL.__dict__, "thinning": 1.0})
    a = generate_surface(cfg, AD, subject_seed(2, 9))
    b = generate_surface(cfg, NC, subject_seed(2, 9))
    assert a.thickness.tobytes() == b.thickness.tobytes()
    assert a.positions.tobytes() == b.positions.tobytes()


def test_affected_region_thinner_in_ad():
    cfg = GenConfig(**{**SMALL.__dict__, "thinning": 0.8})
    a = generate_surface(cfg, AD, subject_seed(1, 3))
    b = generate_surface(cfg, NC, subject_seed(1, 3))
    mask = a.region_id < cfg.n_affected_regions
    assert a.thickness[mask].mean() < b.thickness[mask].mean()
    np.testing.assert_allclose(a.thickness[mask], 0.8 * b.thickness[mask], rtol=1e-15)
    np.testing.assert_array_equal(a.thickness[~mask], b.thickness[~mask])


def test_thickness_positive_and_vertex_count():
    s = generate_surface(SMALL, AD, subject_seed(0, 0))
    assert s.n_vertices == 320
    assert np.all(s.thickness >= SMALL.min_thickness * SMALL.thinning)


# ---------------------------------------------------------------- aggregation

def _surface(thickness, region_id, positions=None):
    n = len(thickness)
    positions = np.zeros((n, 3)) if positions is None else positions
    meta = SubjectMeta(0.0, 28, NC)
    return SurfaceModel(np.asarray(positions, float), np.asarray(thickness, float),
                        np.asarray(region_id), meta, "", frozenset())


def test_constant_thickness_nodes():
    cfg = GenConfig(nodes_target=4, vertices_per_node=3, n_regions=2)
    _, t = aggregate_patches(_surface(np.full(12, 2.5), np.repeat([0, 1], 6)), cfg)
    np.testing.assert_array_equal(t, np.full(4, 2.5))


def test_two_by_two_hand_means():
    cfg = GenConfig(nodes_target=2, vertices_per_node=2, n_regions=1)
    centroids, t = aggregate_patches(_surface([1, 3, 2, 2], [0, 0, 0, 0],
                                              [[0, 0, 0], [2, 0, 0], [0, 4, 0], [0, 0, 6]]), cfg)
    np.testing.assert_array_equal(t, [2.0, 2.0])
    np.testing.assert_array_equal(centroids, [[1, 0, 0], [0, 2, 3]])


def test_region_sorting_groups_vertices():
    cfg = GenConfig(nodes_target=2, vertices_per_node=2, n_regions=2)
    _, t = aggregate_patches(_surface([1, 5, 3, 7], [0, 1, 0, 1]), cfg)
    np.testing.assert_array_equal(t, [2.0, 6.0])


def test_full_scale_vertex_budget():
    cfg = GenConfig()
    assert cfg.n_vertices == 290_500
    s = generate_surface(cfg, NC, subject_seed(0, 0))
    centroids, t = aggregate_patches(s, cfg)
    assert s.n_vertices == 290_500 and t.shape == (1162,) and centroids.shape == (1162, 3)


def test_aggregation_rejects_wrong_vertex_count():
    cfg = GenConfig(nodes_target=2, vertices_per_node=2, n_regions=1)
    with pytest.raises(ConfigError):
        aggregate_patches(_surface([1, 2, 3], [0, 0, 0]), cfg)


# ---------------------------------------------------------------- edge kernel

def test_kernel_values():
    W = edge_weights(np.array([2.0, 2.0, 2.5]), 0.5)
    assert W[0, 1] == 1.0
    assert W[0, 2] == pytest.approx(math.exp(-1), abs=1e-15)
    np.testing.assert_array_equal(np.diag(W), 0.0)


def test_kernel_monotone(rng):
    t = np.sort(rng.uniform(1, 4, size=20))
    W = edge_weights(t, 0.5)
    assert np.all(np.diff(W[0, 1:]) < 0)  # farther in thickness, weaker edge


def test_kernel_domain():
    with pytest.raises(ConfigError):
        edge_weights(np.ones(3), 0.0)
    with pytest.raises(DomainError):
        edge_weights(np.array([1.0, -1.0]), 0.5)


# ---------------------------------------------------------------- datasets

def test_cohort_interleaving_and_counts():
    g = cohort_groups(GenConfig())
    assert len(g) == 121 and g.count(AD) == 60 and g.count(NC) == 61
    balance = np.cumsum([1 if x == AD else -1 for x in g])
    assert np.abs(balance).max() <= 1  # every prefix is balanced


def test_default_cohort_labels():
    labels = [1 if x == AD else 0 for x in cohort_groups(GenConfig())]
    assert sum(labels) == 60 and labels.count(0) == 61


def test_no_ad_subjects():
    ds = generate_dataset(GenConfig(**{**SMALL.__dict__, "n_ad": 0}))
    assert ds.labels.tolist() == [0] * 4


def test_dataset_determinism():
    a = generate_dataset(SMALL)
    b = generate_dataset(SMALL)
    assert [graph_to_bytes(g) for g in a] == [graph_to_bytes(g) for g in b]


def test_weights_in_unit_interval(desk_dataset):
    for g in desk_dataset:
        off = g.W[~np.eye(g.n_nodes, dtype=bool)]
        assert off.min() > 0.0 and off.max() <= 1.0
        assert g.n_edges == 8128


def test_desk_preset():
    cfg = GenConfig.desk()
    assert (cfg.nodes_target, cfg.vertices_per_node, cfg.n_ad + cfg.n_nc) == (128, 50, 40)


def test_full_graph_edge_count():
    g, _ = build_graph(GenConfig(), AD, subject_seed(0, 0), "sub-0000")
    assert g.n_nodes == 1162 and g.n_edges == 674_541


def test_signal_monotone_in_thinning():
    # mean weight between affected and unaffected nodes, averaged over AD graphs
    def cross_weight(thinning):
        cfg = GenConfig(**{**SMALL.__dict__, "thinning": thinning, "n_ad": 6, "n_nc": 0})
        vals = []
        for g in generate_dataset(cfg):
            k = int(np.ceil(cfg.n_affected_regions * cfg.nodes_target / cfg.n_regions))
            vals.append(g.W[:k, k:].mean())
        return np.mean(vals)

    ws = [cross_weight(t) for t in (1.0, 0.95, 0.9, 0.85, 0.7)]
    assert all(a > b for a, b in zip(ws, ws[1:]))


@pytest.mark.parametrize("field, value", [
    ("thinning", 0.0), ("thinning", 1.2), ("sigma_t", 0.0), ("n_regions", 64), ("nodes_target", 0),
])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        GenConfig(**{**SMALL.__dict__, field: value})

