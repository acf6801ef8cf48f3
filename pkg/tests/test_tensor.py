import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ratecascade import tensor as tn
from ratecascade.errors import ContractError, DimensionError
from ratecascade.tensor import Tensor

# values near zero make exact-zero gradients, where a relative error is meaningless
floats = st.floats(-3, 3, allow_nan=False, width=64).filter(lambda v: abs(v) > 0.05)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=floats)


def check(fn, *arrs, tol=1e-6):
    with tn.precision(np.float64):
        assert tn.gradcheck(fn, list(arrs)) < tol


@given(arrays((3, 4)), arrays((4,)))
def test_add_broadcast_gradient(a, b):
    check(lambda x, y: tn.sum(tn.mul(tn.add(x, y), tn.add(x, y))), a, b)


@given(arrays((2, 3)), arrays((2, 1)))
def test_sub_mul_gradient(a, b):
    check(lambda x, y: tn.sum(tn.mul(tn.sub(x, y), tn.mul(x, y))), a, b)


@given(arrays((2, 3, 4)), arrays((4, 5)))
def test_matmul_shared_weight_gradient(a, b):
    check(lambda x, y: tn.sum(tn.mul(tn.matmul(x, y), tn.matmul(x, y))), a, b)


@given(arrays((2, 3, 4)), arrays((2, 4, 2)))
def test_batched_matmul_gradient(a, b):
    check(lambda x, y: tn.sum(tn.mul(tn.matmul(x, y), tn.matmul(x, y))), a, b)


@given(arrays((3, 5)), arrays((3, 5)))
def test_softmax_gradient(a, w):
    check(lambda x: tn.sum(tn.mul(tn.softmax_rows(x), Tensor(w))), a)


@given(arrays((3, 4)), arrays((4,)))
def test_rms_norm_gradient(a, g):
    check(lambda x, y: tn.sum(tn.mul(tn.rms_norm(x, y), tn.rms_norm(x, y))), a, g, tol=1e-5)


@given(arrays((4, 3)))
def test_silu_gradient(a):
    check(lambda x: tn.sum(tn.mul(tn.silu(x), tn.silu(x))), a)


@given(arrays((3, 2)), arrays((3, 3)), arrays((3, 5)))
def test_concat_gradient(a, b, w):
    check(lambda x, y: tn.sum(tn.mul(tn.concat_channels(x, y), Tensor(w))), a, b)


@given(arrays((2, 6)), arrays((3, 4)))
def test_reshape_transpose_gradient(a, w):
    check(lambda x: tn.sum(tn.mul(tn.transpose(tn.reshape(x, (4, 3)), (1, 0)), Tensor(w))), a)


@given(arrays((3, 4)), arrays((3, 4)))
def test_pair_swap_gradient(a, w):
    check(lambda x: tn.sum(tn.mul(tn.pair_swap(x), Tensor(w))), a)


@given(arrays((3, 4)), arrays((3, 4)))
def test_mse_mean_gradient(a, b):
    check(lambda x, y: tn.add(tn.mse(x, y), tn.mean(x)), a, b)


def test_softmax_rows_sum_to_one_and_are_stable():
    x = Tensor(np.array([[1000.0, 1000.0, 0.0], [-5.0, 0.0, 5.0]]))
    s = tn.softmax_rows(x).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    np.testing.assert_allclose(s[0], [0.5, 0.5, 0.0], atol=1e-12)


def test_rms_norm_value():
    # rows scaled to unit RMS: [3, 4] has RMS sqrt(12.5)
    with tn.precision(np.float64):
        out = tn.rms_norm(Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([1.0, 2.0]))).data
    np.testing.assert_allclose(out, [[3 / np.sqrt(12.5 + 1e-6), 8 / np.sqrt(12.5 + 1e-6)]])


def test_silu_values():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(tn.silu(Tensor(x)).data, x / (1 + np.exp(-x)), rtol=1e-12)


def test_pair_swap_values():
    out = tn.pair_swap(Tensor(np.array([1.0, 2.0, 3.0, 4.0]))).data
    np.testing.assert_array_equal(out, [-2.0, 1.0, -4.0, 3.0])


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    tn.backward(tn.sum(tn.add(tn.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_scalar_and_tracking():
    with pytest.raises(ContractError):
        tn.backward(tn.mul(Tensor(np.ones(3), requires_grad=True), 2.0))
    with pytest.raises(ContractError):
        tn.backward(tn.sum(Tensor(np.ones(3))))


def test_shape_errors():
    with pytest.raises(DimensionError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        y = tn.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_no_grad_is_per_thread():
    seen = []

    def worker():
        seen.append(tn.is_grad_enabled())

    with tn.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [True]


def test_count_macs_matmul():
    with tn.count_macs() as c:
        tn.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert c[0] == 2 * 3 * 4 * 5


def test_precision_mode_and_dtype_propagation():
    with tn.precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
        assert tn.mul(Tensor([1.0]), 2.0).dtype == np.float32
    assert tn.get_default_dtype() == np.float64
    assert Tensor(np.ones(2, dtype=np.float32)).dtype == np.float32


def test_relative_error_is_normwise():
    assert tn.relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3)
    assert tn.relative_error(np.zeros(2), np.zeros(2)) == 0.0
