import math

import numpy as np
import pytest

from dissimspace import numeric as nm
from dissimspace.errors import NumericalError, ShapeError
from dissimspace.gradsuite import (check_batchnorm, check_cross_entropy, check_dropout,
                                   check_linear, check_relu)

from conftest import naive_matmul_bias


# -- linear -----------------------------------------------------------------

def test_linear_identity():
    out, _ = nm.linear_forward([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
    assert out.tolist() == [[1.0, 2.0]]


def test_linear_direct_value():
    out, _ = nm.linear_forward([[1.0, 1.0]], [[2.0, 3.0]], [1.0])
    assert out.tolist() == [[6.0]]


def test_linear_matches_loop_oracle(rng):
    x, W, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5)
    out, _ = nm.linear_forward(x, W, b)
    np.testing.assert_allclose(out, naive_matmul_bias(x, W, b), rtol=1e-12, atol=1e-14)


def test_linear_loop_oracle_many_shapes(rng):
    for _ in range(100):
        B, di, do = rng.integers(1, 7, size=3)
        x, W = rng.standard_normal((B, di)), rng.standard_normal((do, di))
        b = rng.standard_normal(do) if rng.random() < 0.5 else None
        out, _ = nm.linear_forward(x, W, b)
        np.testing.assert_allclose(out, naive_matmul_bias(x, W, b), rtol=1e-12, atol=1e-13)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError, match="linear"):
        nm.linear_forward(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        nm.linear_forward(np.ones((2, 3)), np.ones((4, 3)), np.ones(3))


def test_linear_backward_shapes(rng):
    x, W, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5)
    out, cache = nm.linear_forward(x, W, b)
    dx, dW, db = nm.linear_backward(np.ones_like(out), cache)
    assert dx.shape == x.shape and dW.shape == W.shape and db.shape == b.shape
    np.testing.assert_array_equal(db, np.full(5, 4.0))


# -- relu ---------------------------------------------------------------------

def test_relu_values():
    out, cache = nm.relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert out.tolist() == [0.0, 0.0, 2.0]
    assert nm.relu_backward(np.ones(3), cache).tolist() == [0.0, 0.0, 1.0]


# -- softmax cross-entropy ---------------------------------------------------

def test_ce_uniform_logits():
    loss, _ = nm.softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert loss == pytest.approx(1.386294, abs=1e-6)


def test_ce_confident_limit():
    logits = np.zeros((1, 5))
    logits[0, 2] = 50.0
    loss, _ = nm.softmax_cross_entropy(logits, [2])
    assert loss < 1e-9


def test_ce_rejects_bad_label():
    with pytest.raises(ValueError):
        nm.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        nm.softmax_cross_entropy(np.zeros((2, 3)), [-1, 0])


def test_ce_huge_logits_stay_finite():
    loss, d = nm.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [1])
    assert np.isfinite(loss) and np.all(np.isfinite(d))
    assert loss == pytest.approx(2000.0)


# -- batch norm --------------------------------------------------------------

def test_bn_constant_column_gives_beta():
    x = np.column_stack([np.full(6, 3.5), np.arange(6.0)])
    out, _ = nm.batchnorm_forward(x, np.array([2.0, 1.0]), np.array([0.7, 0.0]))
    np.testing.assert_array_equal(out[:, 0], np.full(6, 0.7))


def test_bn_standardised_input_passes_through():
    x = np.array([[-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [1.0, 1.0]])
    out, _ = nm.batchnorm_forward(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(out, x / math.sqrt(1 + nm.BN_EPS), rtol=1e-14)
    np.testing.assert_allclose(out, x, rtol=1e-5)


def test_bn_needs_two_rows_in_train():
    with pytest.raises(ValueError):
        nm.batchnorm_forward(np.ones((1, 3)), np.ones(3), np.zeros(3))


def test_bn_running_stats_and_eval(rng):
    st = nm.BatchNormState.create(3)
    x = rng.standard_normal((10, 3)) + 2.0
    nm.batchnorm_forward(x, st.gamma.value, st.beta.value, st, mode="train")
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(0), rtol=1e-12)
    out, _ = nm.batchnorm_forward(x[:1], st.gamma.value, st.beta.value, st, mode="eval")
    expect = (x[:1] - st.running_mean) / np.sqrt(st.running_var + nm.BN_EPS)
    np.testing.assert_allclose(out, expect, rtol=1e-12)


# -- dropout -----------------------------------------------------------------

def test_dropout_identity_cases(rng):
    x = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(nm.dropout_forward(x, 0.0, rng=rng)[0], x)
    for p in (0.1, 0.5, 0.9):
        np.testing.assert_array_equal(nm.dropout_forward(x, p, mode="eval")[0], x)


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        nm.dropout_forward(np.ones(3), 1.0, rng=nm.make_rng(0))


def test_dropout_monte_carlo():
    rng = nm.make_rng(7)
    x = rng.uniform(1.0, 2.0, 100_000)
    out, mask = nm.dropout_forward(x, 0.5, rng=rng)
    survivors = float((mask > 0).mean())
    assert abs(survivors - 0.5) <= 0.01
    assert abs(out.mean() - x.mean()) <= 0.02 * x.mean()


# -- optimiser ---------------------------------------------------------------

def test_sgd_plain_descent(rng):
    v = rng.standard_normal(4)
    g = rng.standard_normal(4)
    p = nm.Param(v.copy())
    p.grad[...] = g
    nm.sgd_momentum_step([p], lr=0.1)
    np.testing.assert_array_equal(p.value, v - 0.1 * g)


def test_sgd_zero_grad_no_change(rng):
    v = rng.standard_normal(4)
    p = nm.Param(v.copy())
    nm.sgd_momentum_step([p], lr=0.5)
    np.testing.assert_array_equal(p.value, v)


def test_sgd_two_momentum_steps():
    g = np.array([1.0, -2.0])
    p = nm.Param(np.zeros(2))
    for _ in range(2):
        p.grad[...] = g
        nm.sgd_momentum_step([p], lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p.value, -0.1 * (g + 1.9 * g), rtol=1e-15)


def test_sgd_weight_decay_and_frozen():
    p = nm.Param(np.array([2.0]))
    nm.sgd_momentum_step([p], lr=0.1, weight_decay=0.5)
    assert p.value[0] == pytest.approx(2.0 - 0.1 * 1.0)
    q = nm.Param(np.array([2.0]), trainable=False)
    q.grad[...] = 1.0
    nm.sgd_momentum_step([q], lr=0.1)
    assert q.value[0] == 2.0


# -- gradient checking -------------------------------------------------------

def test_gradcheck_constant():
    w = np.ones(3)
    assert nm.finite_diff_gradcheck(lambda: 5.0, [w], [np.zeros(3)]) == 0.0


def test_gradcheck_quadratic(rng):
    w = rng.standard_normal(6)
    err = nm.finite_diff_gradcheck(lambda: 0.5 * float(w @ w), [w], [w.copy()])
    assert err < 1e-6


def test_gradcheck_rejects_non_finite():
    w = np.ones(2)
    with pytest.raises(NumericalError):
        nm.finite_diff_gradcheck(lambda: float("nan"), [w], [np.zeros(2)])


def test_gradcheck_flags_wrong_gradient(rng):
    w = rng.standard_normal(3)
    assert nm.finite_diff_gradcheck(lambda: 0.5 * float(w @ w), [w], [2 * w]) > 0.1


@pytest.mark.parametrize("check,tol", [(check_linear, 1e-4), (check_relu, 1e-4),
                                       (check_cross_entropy, 1e-4), (check_batchnorm, 1e-3),
                                       (check_dropout, 1e-4)])
def test_layer_gradients(check, tol):
    rng = nm.make_rng(99)
    assert max(check(rng) for _ in range(20)) < tol


# -- determinism and init ----------------------------------------------------

def test_rng_reproducible():
    a = nm.make_rng(42).standard_normal(10)
    b = nm.make_rng(42).standard_normal(10)
    np.testing.assert_array_equal(a, b)


def test_glorot_bounds(rng):
    W = nm.glorot_uniform(rng, 30, 20)
    assert W.shape == (30, 20)
    assert np.abs(W).max() <= math.sqrt(6 / 50)


def test_param_shapes_consistent():
    p = nm.Param(np.zeros((2, 3)))
    assert p.value.shape == p.grad.shape == p.buf.shape
