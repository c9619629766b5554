"""Tape engine: spec'd op examples plus finite-difference gradient checks."""

import math

import numpy as np
import pytest

from casgrow.autodiff import ContractError, ShapeError, Tape, as_matrix

FD_STEP = 1e-5
FD_RTOL = 1e-6


def finite_difference(loss_fn, x0):
    """Central-difference gradient of a scalar loss over entries of x0."""
    x = x0.copy()
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            orig = x[i, j]
            x[i, j] = orig + FD_STEP
            hi = loss_fn(x)
            x[i, j] = orig - FD_STEP
            lo = loss_fn(x)
            x[i, j] = orig
            grad[i, j] = (hi - lo) / (2 * FD_STEP)
    return grad


def assert_close_rel(analytic, numeric, rtol=FD_RTOL, atol=1e-8):
    denominator = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > np.maximum(rtol * denominator, atol)
    assert not bad.any(), f"gradient mismatch\nanalytic={analytic}\nnumeric={numeric}"


# -- op values ---------------------------------------------------------------


def test_matmul_identity():
    t = Tape()
    m = t.constant([[3.0, -1.0], [2.5, 7.0]])
    eye = t.constant(np.eye(2))
    np.testing.assert_array_equal(t.matmul(eye, m).value, m.value)


def test_matmul_hand_example():
    t = Tape()
    out = t.matmul(t.constant([[1.0, 2.0], [3.0, 4.0]]), t.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    t = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        t.matmul(t.constant(np.zeros((2, 3))), t.constant(np.zeros((2, 2))))


def test_row_softmax_uniform_on_equal_entries():
    t = Tape()
    out = t.row_softmax(t.constant([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.value, [[1 / 3] * 3], atol=1e-12)


def test_row_softmax_no_overflow_on_large_inputs():
    t = Tape()
    out = t.row_softmax(t.constant([[1000.0, 1000.0]]))
    np.testing.assert_allclose(out.value, [[0.5, 0.5]], atol=1e-12)


def test_row_softmax_scalar_evaluation():
    t = Tape()
    out = t.row_softmax(t.constant([[1.0, 2.0]]))
    e = math.e
    np.testing.assert_allclose(out.value, [[1 / (1 + e), e / (1 + e)]], atol=1e-12)


@pytest.mark.parametrize("x,slope,expected", [(5.0, 0.2, 5.0), (-5.0, 0.2, -1.0), (0.0, 0.2, 0.0)])
def test_leaky_relu_values(x, slope, expected):
    t = Tape()
    assert t.leaky_relu(t.constant([[x]]), slope).value[0, 0] == pytest.approx(expected)


def test_leaky_relu_rejects_bad_slope():
    t = Tape()
    for slope in (0.0, 1.0, -0.3):
        with pytest.raises(ContractError):
            t.leaky_relu(t.constant([[1.0]]), slope)


def test_concat_cols_shapes_and_empty():
    t = Tape()
    a = t.constant(np.ones((4, 3)))
    b = t.constant(np.zeros((4, 2)))
    assert t.concat_cols(a, b).shape == (4, 5)
    empty = t.constant(np.zeros((4, 0)))
    np.testing.assert_array_equal(t.concat_cols(a, empty).value, a.value)
    with pytest.raises(ShapeError):
        t.concat_cols(a, t.constant(np.zeros((3, 1))))


def test_elu_and_relu_values():
    t = Tape()
    x = t.constant([[-1.0, 0.0, 2.0]])
    np.testing.assert_allclose(t.elu(x).value, [[math.expm1(-1.0), 0.0, 2.0]])
    np.testing.assert_array_equal(t.relu(x).value, [[0.0, 0.0, 2.0]])


def test_log2_values_and_domain():
    t = Tape()
    np.testing.assert_allclose(t.log2(t.constant([[1.0, 8.0]])).value, [[0.0, 3.0]])
    with pytest.raises(ContractError):
        t.log2(t.constant([[0.0]]))


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ContractError):
        as_matrix([[np.nan]])
    with pytest.raises(ContractError):
        as_matrix([[np.inf, 1.0]])


# -- backward basics ---------------------------------------------------------


def test_backward_sum_gives_ones():
    t = Tape()
    w = t.param(np.arange(6.0).reshape(2, 3))
    t.backward(t.sum_all(w))
    np.testing.assert_array_equal(t.grad(w), np.ones((2, 3)))


def test_backward_sum_of_squares_gives_2w():
    t = Tape()
    value = np.array([[1.0, -2.0], [0.5, 3.0]])
    w = t.param(value)
    t.backward(t.sum_all(t.mul(w, w)))
    np.testing.assert_allclose(t.grad(w), 2 * value)


def test_backward_requires_scalar_loss():
    t = Tape()
    w = t.param(np.ones((2, 2)))
    with pytest.raises(ContractError):
        t.backward(w)


def test_fanout_sums_both_paths():
    # y = sum(w) + sum(w * w): reuse of w must add both contributions
    value = np.array([[2.0, -1.5]])
    t = Tape()
    w = t.param(value)
    loss = t.add(t.sum_all(w), t.sum_all(t.mul(w, w)))
    t.backward(loss)
    combined = t.grad(w).copy()

    t1 = Tape()
    w1 = t1.param(value)
    t1.backward(t1.sum_all(w1))
    t2 = Tape()
    w2 = t2.param(value)
    t2.backward(t2.sum_all(t2.mul(w2, w2)))
    np.testing.assert_allclose(combined, t1.grad(w1) + t2.grad(w2))


def test_unreached_param_reports_zero_gradient():
    t = Tape()
    w = t.param(np.ones((2, 2)))
    other = t.param(np.ones((1, 1)))
    t.backward(t.sum_all(other))
    np.testing.assert_array_equal(t.grad(w), np.zeros((2, 2)))


def test_noderef_foreign_tape_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.constant([[1.0]])
    b = t2.constant([[1.0]])
    with pytest.raises(ContractError):
        t1.add(a, b)


# -- finite-difference property checks ---------------------------------------


def loss_through(op_builder, x):
    """Scalar loss: weighted sum of op(x) entries, for FD probing."""
    t = Tape(grad_enabled=False)
    out = op_builder(t, t.constant(x))
    weights = _probe_weights(out.shape)
    return float((out.value * weights).sum())


def grad_through(op_builder, x):
    t = Tape()
    xref = t.param(x)
    out = op_builder(t, xref)
    weights = t.constant(_probe_weights(out.shape))
    t.backward(t.sum_all(t.mul(out, weights)))
    return t.grad(xref)


def _probe_weights(shape):
    # fixed non-uniform weights so FD exercises every output entry
    rng = np.random.default_rng(12345)
    return rng.normal(size=shape)


UNARY_OPS = {
    "relu": lambda t, x: t.relu(x),
    "leaky_relu": lambda t, x: t.leaky_relu(x, 0.2),
    "elu": lambda t, x: t.elu(x),
    "row_softmax": lambda t, x: t.row_softmax(x),
    "transpose": lambda t, x: t.transpose(x),
    "mean_rows": lambda t, x: t.mean_rows(x),
    "scale": lambda t, x: t.scale(x, -1.7),
    "slice_cols": lambda t, x: t.slice_cols(x, 1, 3),
    "log2": lambda t, x: t.log2(x),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("seed", range(10))
def test_unary_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    rows, cols = rng.integers(2, 9, size=2)
    cols = max(cols, 3)  # slice_cols needs at least 3 columns
    x = rng.normal(size=(rows, cols))
    if name == "log2":
        x = np.abs(x) + 0.5
    if name in ("relu", "leaky_relu", "elu"):
        x[np.abs(x) < 1e-3] += 0.01  # keep clear of the kink
    build = UNARY_OPS[name]
    rtol = 1e-4 if name == "row_softmax" else FD_RTOL
    assert_close_rel(
        grad_through(build, x),
        finite_difference(lambda v: loss_through(build, v), x),
        rtol=rtol,
    )


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n, k, m = rng.integers(2, 8, size=3)
    a0, b0 = rng.normal(size=(n, k)), rng.normal(size=(k, m))

    def loss(av, bv):
        t = Tape(grad_enabled=False)
        return float(t.matmul(t.constant(av), t.constant(bv)).value.sum())

    t = Tape()
    a, b = t.param(a0), t.param(b0)
    t.backward(t.sum_all(t.matmul(a, b)))
    assert_close_rel(t.grad(a), finite_difference(lambda v: loss(v, b0), a0))
    assert_close_rel(t.grad(b), finite_difference(lambda v: loss(a0, v), b0))


@pytest.mark.parametrize("seed", range(5))
def test_concat_routes_gradient_blockwise(seed):
    rng = np.random.default_rng(200 + seed)
    a0, b0 = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    probe = rng.normal(size=(4, 5))

    t = Tape()
    a, b = t.param(a0), t.param(b0)
    out = t.concat_cols(a, b)
    t.backward(t.sum_all(t.mul(out, t.constant(probe))))
    np.testing.assert_allclose(t.grad(a), probe[:, :3])
    np.testing.assert_allclose(t.grad(b), probe[:, 3:])

    def loss(av):
        t2 = Tape(grad_enabled=False)
        out2 = t2.concat_cols(t2.constant(av), t2.constant(b0))
        return float((out2.value * probe).sum())

    assert_close_rel(t.grad(a), finite_difference(loss, a0))


@pytest.mark.parametrize("seed", range(5))
def test_masked_softmax_gradient_and_rows(seed):
    rng = np.random.default_rng(300 + seed)
    n = int(rng.integers(2, 7))
    mask = rng.random((n, n)) < 0.5
    np.fill_diagonal(mask, True)
    x0 = rng.normal(size=(n, n))

    build = lambda t, x: t.masked_row_softmax(x, mask)
    t = Tape()
    out = t.masked_row_softmax(t.constant(x0), mask)
    np.testing.assert_allclose(out.value.sum(axis=1), np.ones(n), atol=1e-9)
    assert (out.value[~mask] == 0.0).all()
    assert (out.value[mask] > 0.0).all()

    assert_close_rel(
        grad_through(build, x0),
        finite_difference(lambda v: loss_through(build, v), x0),
        rtol=1e-4,
    )


def test_broadcast_bias_add_gradient():
    rng = np.random.default_rng(7)
    x0, b0 = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
    probe = rng.normal(size=(5, 3))

    t = Tape()
    x, b = t.param(x0), t.param(b0)
    t.backward(t.sum_all(t.mul(t.add(x, b), t.constant(probe))))
    np.testing.assert_allclose(t.grad(b), probe.sum(axis=0, keepdims=True))

    def loss(bv):
        t2 = Tape(grad_enabled=False)
        out = t2.add(t2.constant(x0), t2.constant(bv))
        return float((out.value * probe).sum())

    assert_close_rel(t.grad(b), finite_difference(loss, b0))


def test_determinism_bit_identical():
    def run():
        t = Tape()
        x = t.param(np.linspace(-2, 2, 12).reshape(3, 4))
        out = t.row_softmax(t.elu(t.scale(x, 1.3)))
        t.backward(t.sum_all(out))
        return out.value.copy(), t.grad(x).copy()

    v1, g1 = run()
    v2, g2 = run()
    assert (v1 == v2).all() and (g1 == g2).all()
