import numpy as np
import pytest

from stutterkit import tensor as tc
from stutterkit.errors import NumericalError
from stutterkit.gradcheck import central_difference, check_op_gradients, relative_error


def test_matmul_identity():
    eye = tc.constant(np.eye(2))
    m = tc.parameter([[1.0, 2.0], [3.0, 4.0]])
    out = tc.matmul(eye, m)
    np.testing.assert_array_equal(out.value, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_grad_of_sum_is_ones_times_bt():
    rng = np.random.default_rng(0)
    a = tc.parameter(rng.normal(size=(3, 4)))
    b = tc.constant(rng.normal(size=(4, 2)))
    tc.backward(tc.reduce_sum(tc.matmul(a, b)))
    expected = np.ones((3, 2)) @ b.value.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    a0 = rng.uniform(-2, 2, (3, 4))
    b0 = rng.uniform(-2, 2, (4, 2))

    a = tc.parameter(a0)
    b = tc.parameter(b0)
    tc.backward(tc.reduce_sum(tc.matmul(a, b)))

    num_a = central_difference(lambda x: float(np.sum(x @ b0)), a0)
    num_b = central_difference(lambda x: float(np.sum(a0 @ x)), b0)
    assert relative_error(a.grad, num_a) < 1e-6
    assert relative_error(b.grad, num_b) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        tc.matmul(tc.constant(np.zeros((2, 3))), tc.constant(np.zeros((2, 3))))


def conv1d_naive(x, w, bias):
    """Independent triple-loop cross-correlation with the same padding rule."""
    t, din = x.shape
    k, _, dout = w.shape
    left = (k - 1) // 2
    out = np.zeros((t, dout))
    for ti in range(t):
        for j in range(k):
            src = ti + j - left
            if 0 <= src < t:
                for o in range(dout):
                    out[ti, o] += float(x[src] @ w[j, :, o])
    return out + bias


def test_conv1d_k1_identity_map():
    x = tc.parameter(np.arange(12.0).reshape(4, 3))
    w = tc.constant(np.eye(3)[None, :, :])
    out = tc.conv1d(x, w, tc.constant(np.zeros(3)))
    np.testing.assert_array_equal(out.value, x.value)


def test_conv1d_impulse_reversed_kernel():
    x = np.zeros((6, 1))
    x[2, 0] = 1.0
    w = np.array([[[0.5]], [[-1.25]], [[2.0]]])  # taps a, b, c
    out = tc.conv1d(tc.constant(x), tc.constant(w), tc.constant(np.zeros(1)))
    np.testing.assert_allclose(out.value, conv1d_naive(x, w, np.zeros(1)))
    # cross-correlation places the reversed kernel around the impulse
    np.testing.assert_allclose(out.value[:, 0], [0.0, 2.0, -1.25, 0.5, 0.0, 0.0])


@pytest.mark.parametrize("t,k", [(6, 3), (5, 4), (2, 7)])
def test_conv1d_matches_naive_oracle(t, k):
    rng = np.random.default_rng(t * 10 + k)
    x = rng.uniform(-2, 2, (t, 3))
    w = rng.uniform(-2, 2, (k, 3, 2))
    b = rng.uniform(-2, 2, 2)
    out = tc.conv1d(tc.constant(x), tc.constant(w), tc.constant(b))
    np.testing.assert_allclose(out.value, conv1d_naive(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv1d_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-2, 2, (6, 3))
    w0 = rng.uniform(-2, 2, (3, 3, 2))
    b0 = rng.uniform(-2, 2, 2)

    x, w, b = tc.parameter(x0), tc.parameter(w0), tc.parameter(b0)
    tc.backward(tc.reduce_sum(tc.conv1d(x, w, b)))

    num_x = central_difference(lambda v: float(np.sum(conv1d_naive(v, w0, b0))), x0)
    num_w = central_difference(lambda v: float(np.sum(conv1d_naive(x0, v, b0))), w0)
    num_b = central_difference(lambda v: float(np.sum(conv1d_naive(x0, w0, v))), b0)
    assert relative_error(x.grad, num_x) < 1e-6
    assert relative_error(w.grad, num_w) < 1e-6
    assert relative_error(b.grad, num_b) < 1e-6


def test_conv1d_rejects_nonpositive_kernel():
    with pytest.raises(ValueError):
        tc.conv1d(
            tc.constant(np.zeros((4, 2))),
            tc.constant(np.zeros((0, 2, 2))),
            tc.constant(np.zeros(2)),
        )


def test_elementwise_anchor_values():
    assert tc.sigmoid(tc.constant(0.0)).value == 0.5

    x = tc.parameter(-3.0)
    out = tc.relu(x)
    assert out.value == 0.0
    tc.backward(out)
    assert x.grad == 0.0

    x = tc.parameter(0.0)
    tc.backward(tc.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_sigmoid_saturation_is_finite():
    out = tc.sigmoid(tc.constant([-1000.0, 1000.0]))
    np.testing.assert_allclose(out.value, [0.0, 1.0])


def test_log_rejects_nonpositive():
    with pytest.raises(NumericalError):
        tc.log(tc.constant([1.0, 0.0]))


def test_reduce_anchor_values():
    rows = tc.constant(np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_allclose(tc.reduce_mean(rows, axis=0).value, [1.0, 2.0, 3.0])

    cas = tc.constant([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(tc.reduce_sum(cas, axis=1).value, [3.0, 7.0, 11.0])


def test_reduce_mean_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-2, 2, (4, 3))
    x = tc.parameter(x0)
    tc.backward(tc.reduce_sum(tc.reduce_mean(x, axis=0)))
    num = central_difference(lambda v: float(np.sum(np.mean(v, axis=0))), x0)
    assert relative_error(x.grad, num) < 1e-6


def test_reduce_max_ties_route_to_lowest_index():
    x = tc.parameter([[2.0, 2.0, 1.0]])
    tc.backward(tc.reduce_sum(tc.reduce_max(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_reduce_rejects_empty_axis():
    with pytest.raises(ValueError):
        tc.reduce_sum(tc.constant(np.zeros((0, 3))), axis=0)


def test_gather_rows_identity_and_duplicates():
    x0 = np.arange(12.0).reshape(4, 3)
    x = tc.parameter(x0)
    out = tc.gather_rows(x, [0, 1, 2, 3])
    np.testing.assert_array_equal(out.value, x0)

    x = tc.parameter(x0)
    tc.backward(tc.reduce_sum(tc.gather_rows(x, [2, 2])))
    expected = np.zeros_like(x0)
    expected[2] = 2.0
    np.testing.assert_array_equal(x.grad, expected)


def test_gather_rows_rejects_out_of_range():
    with pytest.raises(IndexError):
        tc.gather_rows(tc.constant(np.zeros((3, 2))), [0, 3])
    with pytest.raises(IndexError):
        tc.gather_rows(tc.constant(np.zeros((3, 2))), [-1])


def test_gather_rows_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-2, 2, (6, 3))
    idx = [5, 0, 3, 3]
    x = tc.parameter(x0)
    tc.backward(tc.reduce_sum(tc.gather_rows(x, idx)))
    num = central_difference(lambda v: float(np.sum(v[idx])), x0)
    assert relative_error(x.grad, num) < 1e-6


def test_layernorm_constant_row_zeroes_before_affine():
    x = tc.constant(np.full((3, 4), 7.5))
    out = tc.layernorm(x, tc.constant(np.ones(4)), tc.constant(np.zeros(4)))
    np.testing.assert_allclose(out.value, 0.0, atol=1e-12)


def test_layernorm_standardizes_rows():
    rng = np.random.default_rng(6)
    x = tc.constant(rng.normal(2.0, 3.0, (5, 64)))
    out = tc.layernorm(x, tc.constant(np.ones(64)), tc.constant(np.zeros(64)))
    np.testing.assert_allclose(out.value.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.value.var(axis=1), 1.0, atol=1e-3)


def test_softmax_rows_uniform_and_stability():
    out = tc.softmax_rows(tc.constant(np.zeros((2, 5))))
    np.testing.assert_allclose(out.value, 0.2)

    out = tc.softmax_rows(tc.constant([[1000.0, 1000.0]]))
    np.testing.assert_allclose(out.value, [[0.5, 0.5]])


def test_backward_accumulates_shared_node():
    x = tc.parameter([1.0, 2.0])
    y = tc.add(x, x)
    tc.backward(tc.reduce_sum(y))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    # two separate backward calls accumulate as well
    x = tc.parameter([1.0, 2.0])
    tc.backward(tc.reduce_sum(tc.mul(x, x)))
    first = x.grad.copy()
    tc.backward(tc.reduce_sum(tc.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = tc.parameter(rng.uniform(-2, 2, (4, 4)))
        w = tc.parameter(rng.uniform(-2, 2, (4, 4)))
        out = tc.reduce_sum(tc.mul(tc.softmax_rows(tc.matmul(x, w)), tc.sigmoid(x)))
        tc.backward(out)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


def test_rank_limit_enforced():
    with pytest.raises(ValueError):
        tc.constant(np.zeros((2, 2, 2, 2)))


def test_forward_nan_raises():
    with pytest.raises(NumericalError):
        tc.exp(tc.constant(1000.0))


def test_every_op_matches_finite_differences():
    failures = [c for c in check_op_gradients(seed=0) if not c.passed]
    assert not failures, f"gradient mismatches: {[(c.name, c.rel_err) for c in failures]}"
