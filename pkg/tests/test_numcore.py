import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvse import numcore as nc
from cvse.errors import NumericError, ShapeError, UsageError


def finite_diff(fn, params, h=1e-4):
    """Independent central-difference gradients of a scalar function of a
    dict of arrays; used as the oracle for backward()."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=float)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus = {k: v.copy() for k, v in params.items()}
            minus[name][idx] -= h
            g[idx] = (fn(plus) - fn(minus)) / (2 * h)
        grads[name] = g
    return grads


def max_rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# ---------------------------------------------------------------------------
# linear_forward

def test_linear_identity():
    out = nc.linear_forward([1.0, 0.0], np.eye(2), [0.0, 0.0])
    assert np.allclose(out.value, [1.0, 0.0])


def test_linear_zero_input_returns_bias():
    out = nc.linear_forward([0.0, 0.0], [[5.0, -1.0], [2.0, 7.0]], [2.0, 3.0])
    assert np.allclose(out.value, [2.0, 3.0])


def test_linear_hand_computed():
    # W x + b = [[1,1],[0,1]] [1,2] + [1,0] = [3,2] + [1,0] = [4,2]
    out = nc.linear_forward([1.0, 2.0], [[1.0, 1.0], [0.0, 1.0]], [1.0, 0.0])
    assert np.allclose(out.value, [4.0, 2.0])


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        nc.linear_forward([1.0, 2.0, 3.0], np.eye(2), [0.0, 0.0])
    with pytest.raises(ShapeError):
        nc.linear_forward([1.0, 2.0], np.eye(2), [0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform_on_constant():
    out = nc.softmax([3.5, 3.5, 3.5, 3.5])
    assert np.allclose(out.value, [0.25] * 4)


def test_softmax_singleton():
    assert np.allclose(nc.softmax([42.0]).value, [1.0])


def test_softmax_hand_computed():
    out = nc.softmax([0.0, math.log(3.0)])
    assert np.allclose(out.value, [0.25, 0.75], atol=1e-12)


def test_softmax_empty_raises():
    with pytest.raises(ShapeError):
        nc.softmax(np.array([]))


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.floats(-100, 100))
def test_softmax_sum_and_shift_invariance(values, shift):
    z = np.array(values)
    s = nc.softmax(z).value
    assert abs(s.sum() - 1.0) <= 1e-9
    assert np.all(s >= 0)
    shifted = nc.softmax(z + shift).value
    assert np.max(np.abs(s - shifted)) <= 1e-9


def test_softmax_stable_for_large_inputs():
    s = nc.softmax([1000.0, 1000.0]).value
    assert np.allclose(s, [0.5, 0.5])


# ---------------------------------------------------------------------------
# l2_normalize

def test_l2_normalize_three_four_five():
    assert np.allclose(nc.l2_normalize([3.0, 4.0]).value, [0.6, 0.8])


def test_l2_normalize_idempotent_on_unit():
    v = np.array([1.0, 0.0, 0.0])
    assert np.allclose(nc.l2_normalize(v).value, v)


def test_l2_normalize_zero_guard():
    assert np.allclose(nc.l2_normalize([0.0, 0.0], eps=1e-8).value, [0.0, 0.0])


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6),
       st.floats(0.1, 10.0))
def test_l2_normalize_norm_and_scale_invariance(values, k):
    v = np.array(values)
    if np.linalg.norm(v) <= 1e-6:
        return
    y = nc.l2_normalize(v).value
    assert abs(np.linalg.norm(y) - 1.0) <= 1e-6
    assert np.max(np.abs(nc.l2_normalize(k * v).value - y)) <= 1e-6


# ---------------------------------------------------------------------------
# sq_l2_distance

def test_sq_l2_distance_examples():
    assert float(nc.sq_l2_distance([1.0, 2.0], [1.0, 2.0]).value) == 0.0
    assert float(nc.sq_l2_distance([0.0, 0.0], [1.0, 1.0]).value) == 2.0
    # (1-4)^2 + (2-6)^2 + (3-3)^2 = 9 + 16 + 0 = 25
    assert float(nc.sq_l2_distance([1.0, 2.0, 3.0], [4.0, 6.0, 3.0]).value) == 25.0


@settings(max_examples=100)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6))
def test_sq_l2_distance_symmetric_and_nonnegative(values):
    a = np.array(values)
    b = a[::-1].copy()
    d_ab = float(nc.sq_l2_distance(a, b).value)
    d_ba = float(nc.sq_l2_distance(b, a).value)
    assert d_ab == d_ba
    assert d_ab >= 0.0
    assert float(nc.sq_l2_distance(a, a).value) == 0.0


def test_sq_l2_distance_dim_mismatch():
    with pytest.raises(ShapeError):
        nc.sq_l2_distance([1.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# backward

def test_backward_identity_graph():
    x = nc.Tensor(np.array(3.0))
    y = nc.add(x, 0.0)
    y.backward()
    assert x.grad == 1.0


def test_backward_quadratic_minimum_zero_gradient():
    c = np.array([1.0, -2.0, 3.0])
    x = nc.Tensor(c.copy())
    loss = nc.sq_l2_distance(x, c)
    loss.backward()
    assert np.allclose(x.grad, 0.0)


def test_backward_fanout_accumulates():
    # f(x) = dot(x, x) -> grad 2x
    x = nc.Tensor(np.array([1.0, 2.0, -3.0]))
    nc.dot(x, x).backward()
    assert np.allclose(x.grad, [2.0, 4.0, -6.0])


def test_backward_requires_seed_for_vectors():
    x = nc.Tensor(np.array([1.0, 2.0]))
    y = nc.add(x, x)
    with pytest.raises(UsageError):
        y.backward()


def test_gradient_of_unrecorded_value_raises():
    x = nc.Tensor(np.array([1.0]))
    other = nc.Tensor(np.array([2.0]))
    nc.tsum(nc.mul(x, x)).backward()
    with pytest.raises(UsageError):
        nc.gradient(other)


GRAPH_FAMILIES = [
    lambda p: nc.dot(nc.softmax(nc.linear_forward(p["x"], p["W"], p["b"])), p["y"]),
    lambda p: nc.sq_l2_distance(nc.l2_normalize(nc.linear_forward(p["x"], p["W"], p["b"])),
                                nc.l2_normalize(p["y"])),
    lambda p: nc.tsum(nc.hinge(nc.sub(nc.matvec(p["W"], p["x"]), p["y"]))),
    lambda p: nc.dot(nc.concat(p["x"], p["y"]), nc.concat(p["y"], p["x"])),
    lambda p: nc.tsum(nc.mul(nc.l2_normalize_rows(p["M"]), p["M"])),
    lambda p: nc.dot(nc.softmax(nc.matvec(p["M"], p["x"])), nc.sq_dist_rows(p["M"], p["x"])),
    lambda p: nc.tsum(nc.concat_rows_with(p["M"], p["y"])) + nc.dot(p["x"], p["x"]),
]


def test_backward_matches_finite_differences_on_random_graphs():
    rng = np.random.default_rng(20240817)
    for trial in range(4):
        base = {
            "x": rng.standard_normal(3),
            "y": rng.standard_normal(3),
            "b": rng.standard_normal(3),
            "W": rng.standard_normal((3, 3)),
            "M": rng.standard_normal((4, 3)) + 0.5,
        }
        for family in GRAPH_FAMILIES:
            leaves = {k: nc.Tensor(v) for k, v in base.items()}
            out = family(leaves)
            out.backward()
            oracle = finite_diff(lambda arrs: float(family({k: nc.Tensor(v) for k, v in arrs.items()}).value),
                                 base)
            for name in base:
                analytic = leaves[name].grad
                if analytic is None:
                    analytic = np.zeros_like(base[name])
                assert max_rel_err(analytic, oracle[name]) < 1e-4, (trial, family)


# ---------------------------------------------------------------------------
# grad_check

def test_grad_check_quadratic_is_tight():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def quadratic(leaves):
        return nc.dot(leaves["x"], nc.matvec(nc.Tensor(A), leaves["x"]))

    err = nc.grad_check(quadratic, {"x": np.array([0.3, -1.2])}, h=1e-4)
    assert err < 1e-6


def test_grad_check_constant_function():
    err = nc.grad_check(lambda leaves: nc.Tensor(np.array(7.0)), {"x": np.array([1.0, 2.0])})
    assert err == 0.0


def test_grad_check_rejects_non_scalar():
    with pytest.raises(UsageError):
        nc.grad_check(lambda leaves: leaves["x"], {"x": np.array([1.0, 2.0])})


# ---------------------------------------------------------------------------
# Adam

def hand_adam(p0, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Independent unroll of the Adam recurrence for a scalar parameter."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.zeros(2)}
    new, state = nc.adam_step(params, grads, nc.AdamState())
    assert np.array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    for g in (0.37, -2.5):
        new, _ = nc.adam_step({"w": np.array(1.0)}, {"w": np.array(g)}, nc.AdamState(lr=0.001))
        assert abs(float(new["w"]) - (1.0 - 0.001 * np.sign(g))) < 1e-6


def test_adam_two_steps_match_hand_unroll():
    g = 0.8
    state = nc.AdamState(lr=0.001)
    params = {"w": np.array(0.5)}
    for _ in range(2):
        params, state = nc.adam_step(params, {"w": np.array(g)}, state)
    assert abs(float(params["w"]) - hand_adam(0.5, [g, g])) < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nc.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nc.AdamState())
    with pytest.raises(ShapeError):
        nc.adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, nc.AdamState())


# ---------------------------------------------------------------------------
# misc

def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        nc.Tensor(np.array([1.0, np.nan]))


def test_elementwise_shape_guard():
    with pytest.raises(ShapeError):
        nc.add(nc.Tensor(np.zeros(2)), nc.Tensor(np.zeros(3)))
