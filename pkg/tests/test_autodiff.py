import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adiag import autodiff as ad
from adiag.autodiff import BatchNormState, Tensor
from adiag.errors import ContractError, DimensionError


def fd(f, arrays, step=1e-6):
    """Central differences of scalar f(*arrays) w.r.t. each array, computed without the tape."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            fp = f(*arrays)
            a[idx] = orig - step
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def tape_grads(build, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*ts)
    grads = tape.backward(loss, accumulate=False)
    return [grads[t] for t in ts]


def value_of(build):
    def f(*arrays):
        with ad.no_grad():
            return build(*[Tensor(a) for a in arrays]).item()
    return f


def check_op(build, arrays, tol=1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = tape_grads(build, arrays)
    numeric = fd(value_of(build), arrays)
    for a, n in zip(analytic, numeric):
        assert ad.relative_error(a, n) < tol


# ---------------------------------------------------------------- matmul

def test_matmul_hand_values():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_identity_2x2():
    M = Tensor([[0.3, -1.2], [2.5, 7.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ M).data, M.data)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_grad_of_sum_ab_is_ones_bt(rng):
    A = rng.uniform(-1, 1, (3, 4))
    B = rng.uniform(-1, 1, (4, 2))
    gA, gB = tape_grads(lambda a, b: ad.sum_all(a @ b), [A, B])
    np.testing.assert_allclose(gA, np.ones((3, 2)) @ B.T, rtol=0, atol=1e-14)
    check_op(lambda a, b: ad.sum_all(a @ b), [A, B])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-1e6, 1e6)))
def test_matmul_identity_property(M):
    r, c = M.shape
    np.testing.assert_array_equal(ad.matmul(Tensor(M), Tensor(np.eye(c))).data, M)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(r)), Tensor(M)).data, M)


# ---------------------------------------------------------------- softmax

def test_softmax_equal_row():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[5.0, 5.0, 5.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_large_logits_stay_finite():
    out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 1.0 and out[0, 1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-1e300, 1e300)))
def test_softmax_rows_sum_to_one(m):
    s = ad.softmax_rows(Tensor(m)).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_grad(rng):
    w = rng.uniform(-1, 1, (3, 4))
    check_op(lambda m, c: ad.sum_all(ad.mul(ad.softmax_rows(m), c)), [rng.uniform(-1, 1, (3, 4)), w])


# ---------------------------------------------------------------- activations

def test_sigmoid_and_relu_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ad.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])


def test_sigmoid_extremes_finite():
    out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] >= 0.0 and out[1] == 1.0 and np.all(np.isfinite(out))


def test_sigmoid_grad_at_zero():
    x = np.array([0.0])
    (g,) = tape_grads(lambda t: ad.sum_all(ad.sigmoid(t)), [x])
    assert g[0] == 0.25
    (n,) = fd(value_of(lambda t: ad.sum_all(ad.sigmoid(t))), [x])
    assert abs(n[0] - 0.25) < 1e-8


def test_activation_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ad.activation(Tensor([1.0]), "tanh")


# ---------------------------------------------------------------- concat / slicing

def test_concat_with_empty_is_identity(rng):
    a = rng.normal(size=(3, 2))
    out = ad.concat_cols(Tensor(a), Tensor(np.zeros((3, 0))))
    np.testing.assert_array_equal(out.data, a)


def test_concat_definition():
    out = ad.concat_cols(Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])


def test_concat_row_mismatch():
    with pytest.raises(DimensionError):
        ad.concat_cols(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


def test_concat_grad_routing_2x2(rng):
    c = rng.uniform(-1, 1, (2, 2))
    check_op(lambda a, b, w: ad.sum_all(ad.mul(ad.concat_cols(a, b), w)),
             [rng.uniform(-1, 1, (2, 1)), rng.uniform(-1, 1, (2, 1)), c], tol=1e-8)


def test_concat_rows_and_slice_grads(rng):
    w = rng.uniform(-1, 1, (5, 2))
    check_op(lambda a, b, c: ad.sum_all(ad.mul(ad.slice_rows(ad.concat_rows([a, b]), 1, 4), c)),
             [rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, (3, 2)), w[:3]])


# ---------------------------------------------------------------- batch norm

def _bn(x, mode="train", state=None, gamma=None, beta=None):
    f = x.shape[1]
    state = state or BatchNormState.fresh(f)
    gamma = Tensor(np.ones(f) if gamma is None else gamma)
    beta = Tensor(np.zeros(f) if beta is None else beta)
    return ad.batchnorm_nodes(Tensor(x), gamma, beta, state, mode).data, state


def test_batchnorm_constant_column_is_zero():
    out, _ = _bn(np.ones((3, 1)))
    np.testing.assert_array_equal(out, np.zeros((3, 1)))


def test_batchnorm_two_values():
    out, _ = _bn(np.array([[0.0], [2.0]]))
    expected = np.array([[-1.0], [1.0]]) / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_batchnorm_running_stats_update():
    _, state = _bn(np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(state.running_mean, [0.1])
    np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 1.0])


def test_batchnorm_eval_is_affine(rng):
    state = BatchNormState(np.array([0.3, -1.0]), np.array([2.0, 0.5]))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    x = rng.normal(size=(5, 2))
    once, _ = _bn(x, "eval", state, gamma, beta)
    twice, _ = _bn(once, "eval", state, gamma, beta)
    a = gamma / np.sqrt(state.running_var + state.eps)
    b = beta - a * state.running_mean
    np.testing.assert_allclose(twice, a * (a * x + b) + b, rtol=1e-13, atol=1e-13)
    assert state.running_mean.tolist() == [0.3, -1.0]  # eval leaves stats alone


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_grads(rng, mode):
    state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    w = rng.uniform(-1, 1, (4, 3))

    def build(x, g, b):
        return ad.sum_all(ad.mul(ad.batchnorm_nodes(x, g, b, state, mode, update_stats=False), w))

    check_op(build, [rng.uniform(-1, 1, (4, 3)), rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3)])


def test_exact_running_stats_are_order_independent(rng):
    means = [rng.normal(size=4) for _ in range(7)]
    vars_ = [rng.uniform(0.1, 2, size=4) for _ in range(7)]
    a = BatchNormState.fresh(4, momentum=None)
    b = BatchNormState.fresh(4, momentum=None)
    for m, v in zip(means, vars_):
        a.observe(m, v)
    for m, v in reversed(list(zip(means, vars_))):
        b.observe(m, v)
    assert a.running_mean.tobytes() == b.running_mean.tobytes()
    np.testing.assert_allclose(a.running_var, b.running_var, rtol=1e-15)


def test_exact_running_stats_match_pooled_moments(rng):
    # equal-size groups: pooled mean/var equal the moments of the concatenation
    groups = [rng.normal(size=(6, 2)) for _ in range(4)]
    s = BatchNormState.fresh(2, momentum=None)
    for g in groups:
        s.observe(g.mean(axis=0), g.var(axis=0))
    allx = np.concatenate(groups)
    np.testing.assert_allclose(s.running_mean, allx.mean(axis=0), rtol=1e-13)
    np.testing.assert_allclose(s.running_var, allx.var(axis=0), rtol=1e-13)


# ---------------------------------------------------------------- other ops

OPS = {
    "add": (lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), a)), [(3, 2), (1, 2)]),
    "sub": (lambda a, b: ad.sum_all(ad.mul(ad.sub(a, b), a)), [(3, 2), (3, 1)]),
    "mul": (lambda a, b: ad.sum_all(ad.mul(a, b)), [(3, 2), (3, 2)]),
    "neg": (lambda a: ad.sum_all(ad.mul(ad.neg(a), a)), [(2, 2)]),
    "transpose": (lambda a, b: ad.sum_all(ad.mul(a.T, b)), [(2, 3), (3, 2)]),
    "mean": (lambda a: ad.mul(ad.mean_all(a), ad.mean_all(a)), [(3, 3)]),
    "reshape": (lambda a, b: ad.sum_all(ad.mul(ad.reshape(a, (3, 2)), b)), [(2, 3), (3, 2)]),
    "flatten": (lambda a, b: ad.sum_all(ad.mul(ad.flatten(a), b)), [(2, 3), (6,)]),
    "exp": (lambda a: ad.sum_all(ad.exp(a)), [(2, 3)]),
    "log": (lambda a: ad.sum_all(ad.log(ad.add(ad.exp(a), 1.0))), [(2, 3)]),
    "sqrt": (lambda a: ad.sum_all(ad.sqrt(ad.add(ad.mul(a, a), 1.0))), [(2, 3)]),
    "sigmoid": (lambda a, b: ad.sum_all(ad.mul(ad.sigmoid(a), b)), [(3, 3), (3, 3)]),
    "relu": (lambda a, b: ad.sum_all(ad.mul(ad.relu(a), b)), [(3, 3), (3, 3)]),
    "row_normalize": (lambda a, b: ad.sum_all(ad.mul(ad.row_normalize(ad.exp(a)), b)), [(3, 4), (3, 4)]),
    "frobenius": (lambda a: ad.frobenius(a), [(3, 2)]),
    "row_entropy": (lambda a: ad.row_entropy_mean(ad.softmax_rows(a)), [(3, 4)]),
    "bce": (lambda a: ad.bce_with_logits(ad.sum_all(a), 1.0), [(2,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_matches_finite_differences(name, rng):
    build, shapes = OPS[name]
    arrays = [rng.uniform(-1, 1, s) for s in shapes]
    if name == "relu":
        arrays[0][np.abs(arrays[0]) < 1e-3] = 0.5  # keep away from the kink
    check_op(build, arrays)


def test_row_normalize_zero_row():
    out = ad.row_normalize(Tensor([[0.0, 0.0], [1.0, 3.0]])).data
    np.testing.assert_array_equal(out, [[0, 0], [0.25, 0.75]])


def test_broadcast_add_unbroadcasts_grad():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(a + b)
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [3.0, 3.0])


# ---------------------------------------------------------------- backward

def test_sum_gives_all_ones():
    W = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ad.Tape() as tape:
        loss = W.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(W.grad, np.ones((2, 3)))


def test_sum_sigmoid_wx(rng):
    x = rng.uniform(-1, 1, (3, 1))
    check_op(lambda w: ad.sum_all(ad.sigmoid(w @ Tensor(x))), [rng.uniform(-1, 1, (3, 3))])


def test_unreachable_tensor_keeps_zero_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = a.sum()
        _ = b * 2.0
    grads = tape.backward(loss)
    assert b not in grads
    np.testing.assert_array_equal(b.grad, [0.0])


def test_tape_is_replayable(rng):
    W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.sigmoid(W @ W))
    g1 = tape.backward(loss, accumulate=False)[W]
    g2 = tape.backward(loss, accumulate=False)[W]
    assert g1.tobytes() == g2.tobytes()


def test_accumulate_adds_into_grad(rng):
    W = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(W * W)
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_allclose(W.grad, 4 * W.data)


def test_backward_needs_scalar():
    W = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        out = W * 2.0
    with pytest.raises(ContractError):
        tape.backward(out)


def test_no_grad_records_nothing():
    W = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            _ = W * 3.0
    assert tape.records == []


def test_relative_error_definition():
    assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert ad.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.1])) == pytest.approx(0.1 / 2.1)
