"""Tape autodiff tests: finite-difference oracles, softmax exact row sums,
top-k tie rules, and format-context quantization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab import kernels
from moelab.autodiff import Matrix, Tape, compute_format, grad_check, mha_forward
from moelab.errors import ConfigError, EvaluationError, ShapeError


def test_grad_check_sum_of_squares():
    # d/dx sum(x^2) = 2x; at [1,2,3] the analytic grads are [2,4,6].
    def fn(tape, mats):
        sq = tape.mul(mats[0], mats[0])
        return tape.sum_all(sq)

    x = np.array([[1.0, 2.0, 3.0]])
    tape = Tape()
    m = tape.param(x)
    loss = fn(tape, [m])
    tape.backward(loss)
    np.testing.assert_array_equal(m.grad, [[2.0, 4.0, 6.0]])
    assert grad_check(fn, [x]) < 1e-9


def test_grad_check_constant_function():
    def fn(tape, mats):
        return tape.sum_all(tape.cmul(mats[0], np.zeros((1, 3))))

    assert grad_check(fn, [np.array([[1.0, -2.0, 0.5]])]) == 0.0


def test_grad_check_rejects_non_finite():
    def fn(tape, mats):
        out = tape.smul(mats[0], math.inf)
        return tape.sum_all(out)

    with pytest.raises(EvaluationError):
        grad_check(fn, [np.ones((1, 1))])


def test_grad_check_matmul():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    err = grad_check(lambda t, ms: t.sum_all(t.matmul(ms[0], ms[1])), [a, b])
    assert err < 1e-7


def test_grad_check_gelu_chain():
    rng = np.random.default_rng(43)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    err = grad_check(lambda t, ms: t.mean_all(t.gelu(t.matmul(ms[0], ms[1]))), [a, b])
    assert err < 1e-7


def test_grad_check_composite_ffn_shape():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6))
    w1 = rng.standard_normal((6, 8)) * 0.5
    b1 = rng.standard_normal((1, 8)) * 0.1
    w2 = rng.standard_normal((8, 6)) * 0.5
    b2 = rng.standard_normal((1, 6)) * 0.1

    def fn(tape, mats):
        xm, w1m, b1m, w2m, b2m = mats
        h = tape.gelu(tape.add(tape.matmul(xm, w1m), b1m))
        out = tape.add(tape.matmul(h, w2m), b2m)
        return tape.mean_all(tape.mul(out, out))

    assert grad_check(fn, [x, w1, b1, w2, b2]) < 1e-6


def test_grad_check_mse_and_slicing():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 5))
    target = rng.standard_normal((3, 5))

    def fn(tape, mats):
        part = tape.slice_rows(mats[0], 1, 4)
        return tape.mse(part, target)

    assert grad_check(fn, [x]) < 1e-7


def test_grad_check_combine_and_gather():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((5, 4))
    w = rng.uniform(0.2, 0.8, (5, 2))

    def fn(tape, mats):
        xm, wm = mats
        y0 = tape.gelu(xm)
        y1 = tape.smul(xm, 0.5)
        out = tape.combine(wm, [y0, y1])
        return tape.mean_all(tape.mul(out, out))

    assert grad_check(fn, [x, w]) < 1e-6


def test_grad_check_attention():
    rng = np.random.default_rng(12)
    h, enc, heads = 8, 6, 2
    x = rng.standard_normal((5, h))
    ctx = rng.standard_normal((3, enc))
    params = {
        "wq": rng.standard_normal((h, h)) * 0.3,
        "bq": np.zeros((1, h)),
        "wk": rng.standard_normal((enc, h)) * 0.3,
        "bk": np.zeros((1, h)),
        "wv": rng.standard_normal((enc, h)) * 0.3,
        "bv": np.zeros((1, h)),
        "wo": rng.standard_normal((h, h)) * 0.3,
        "bo": np.zeros((1, h)),
    }
    names = list(params)

    def fn(tape, mats):
        xm = tape.const(x)
        cm = tape.const(ctx)
        kw = dict(zip(names, mats))
        out = mha_forward(tape, xm, cm, heads, **kw)
        return tape.mean_all(tape.mul(out, out))

    assert grad_check(fn, [params[n] for n in names]) < 1e-5


def test_mha_rejects_indivisible_heads():
    tape = Tape()
    x = tape.const(np.zeros((2, 6)))
    mats = {k: tape.const(np.zeros((6, 6))) for k in ("wq", "wk", "wv", "wo")}
    biases = {k: tape.const(np.zeros((1, 6))) for k in ("bq", "bk", "bv", "bo")}
    with pytest.raises(ConfigError):
        mha_forward(tape, x, x, 4, mats["wq"], biases["bq"], mats["wk"], biases["bk"],
                    mats["wv"], biases["bv"], mats["wo"], biases["bo"])


# --- softmax ------------------------------------------------------------------


def test_softmax_two_columns_sums_exactly_one():
    rng = np.random.default_rng(4)
    tape = Tape()
    x = tape.const(rng.standard_normal((64, 2)) * 5)
    p = tape.softmax_rows(x)
    sums = p.data[:, 0] + p.data[:, 1]
    assert np.all(sums == 1.0)


@given(st.integers(2, 6), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_within_tolerance(cols, seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    x = tape.const(rng.standard_normal((8, cols)) * 10)
    p = tape.softmax_rows(x)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(p.data >= 0)


def test_softmax_grad_matches_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3))
    coef = rng.standard_normal((4, 3))

    def fn(tape, mats):
        return tape.sum_all(tape.cmul(tape.softmax_rows(mats[0]), coef))

    assert grad_check(fn, [x]) < 1e-7


def test_softmax_saturated_rows_have_dead_gradient():
    # Logit gaps > 40 starve the softmax jacobian: every dL/dlogit entry
    # is at most ~exp(-40), far below 1e-15.
    tape = Tape()
    x = tape.param(np.array([[50.0, 0.0], [0.0, 45.0], [90.0, 41.0]]))
    p = tape.softmax_rows(x)
    loss = tape.sum_all(tape.cmul(p, np.array([[1.0, -1.0]])))
    tape.backward(loss)
    assert np.linalg.norm(x.grad) < 1e-15


# --- top-k ---------------------------------------------------------------------


def test_topk_all_equal_returns_lowest_indices():
    tape = Tape()
    x = tape.const(np.full((3, 5), 0.2))
    vals, idx = tape.topk_rows(x, 3)
    np.testing.assert_array_equal(idx, np.tile([0, 1, 2], (3, 1)))
    np.testing.assert_array_equal(vals.data, np.full((3, 3), 0.2))


def test_topk_orders_descending_and_breaks_ties_low():
    tape = Tape()
    x = tape.const(np.array([[0.1, 0.7, 0.7, 0.2]]))
    vals, idx = tape.topk_rows(x, 2)
    np.testing.assert_array_equal(idx, [[1, 2]])
    np.testing.assert_array_equal(vals.data, [[0.7, 0.7]])


def test_topk_gradient_scatters_to_selected():
    tape = Tape()
    x = tape.param(np.array([[1.0, 3.0, 2.0]]))
    vals, idx = tape.topk_rows(x, 2)
    loss = tape.sum_all(tape.cmul(vals, np.array([[2.0, 5.0]])))
    tape.backward(loss)
    np.testing.assert_array_equal(idx, [[1, 2]])
    np.testing.assert_array_equal(x.grad, [[0.0, 2.0, 5.0]])


@given(st.integers(1, 5), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_topk_values_descending_property(k, seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    x = tape.const(rng.standard_normal((6, 5)))
    vals, idx = tape.topk_rows(x, min(k, 5))
    assert np.all(np.diff(vals.data, axis=1) <= 0)
    rows = np.arange(6)[:, None]
    np.testing.assert_array_equal(x.data[rows, idx], vals.data)


# --- format contexts ------------------------------------------------------------


def test_bf16_format_quantizes_matmul_output():
    tape = Tape()
    a = tape.const(np.array([[1.0, 1.0]]))
    b = tape.const(np.array([[57.75], [57.75]]))  # sums to 115.5, on-grid
    with compute_format("bf16"):
        out = tape.matmul(a, b)
    assert out.data[0, 0] == 115.5

    tape2 = Tape()
    c = tape2.const(np.array([[1.0, 1.0]]))
    d = tape2.const(np.array([[57.75], [57.7502]]))  # off-grid sum truncates
    with compute_format("bf16"):
        out2 = tape2.matmul(c, d)
    assert out2.data[0, 0] == 115.5


def test_bf16_format_softmax_stays_on_f32_grid_and_sums_to_one():
    rng = np.random.default_rng(8)
    tape = Tape()
    x = tape.const(rng.standard_normal((32, 2)))
    with compute_format("bf16"):
        p = tape.softmax_rows(x)
    assert np.array_equal(p.data, p.data.astype(np.float32).astype(np.float64))
    assert np.all(p.data[:, 0] + p.data[:, 1] == 1.0)


def test_unknown_format_rejected():
    with pytest.raises(ConfigError):
        with compute_format("fp8"):
            pass


def test_backward_requires_scalar_and_finite():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    y = tape.smul(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)
    z = tape.smul(tape.sum_all(y), math.nan)
    with pytest.raises(EvaluationError):
        tape.backward(z)


def test_leaves_without_influence_get_zero_grads():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    unused = tape.param(np.ones((3, 3)))
    loss = tape.sum_all(x)
    tape.backward(loss)
    np.testing.assert_array_equal(unused.grad, np.zeros((3, 3)))


def test_matrix_requires_2d():
    with pytest.raises(ShapeError):
        Matrix(np.zeros(3))
