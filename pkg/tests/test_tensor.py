import numpy as np
import pytest

from wscn.errors import TapeError
from wscn.tensor import (Tape, Tensor, backward, clip, exp, log, matmul,
                         tmean, transpose, tsum)


def test_tensor_wraps_and_casts():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32  # ints are promoted to float
    assert t.shape == (3,)
    assert Tensor(np.float64(2.5)).item() == 2.5


def test_tensor_rejects_tensor_input():
    with pytest.raises(TypeError):
        Tensor(Tensor([1.0]))


def test_untaped_ops_are_plain_math():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 3.0 + 1.0
    np.testing.assert_allclose(b.data, [4.0, 7.0])
    assert b.grad is None
    tape = Tape()
    with pytest.raises(TapeError):
        backward(tape, tsum(b))  # produced off-tape


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = a * 2.0
    with pytest.raises(TapeError):
        backward(tape, y)


def test_tapes_do_not_nest():
    with Tape():
        with pytest.raises(TapeError):
            with Tape():
                pass


def test_simple_chain_gradient():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(a * b + a)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [5.0, 6.0])  # b + 1
    np.testing.assert_allclose(b.grad, [2.0, 3.0])  # a


def test_leaf_used_twice_accumulates():
    a = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(a * a)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [6.0])


def test_broadcast_gradients_unbroadcast():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        y = tsum(a + b)
    backward(tape, y)
    assert a.grad.shape == (3, 1)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))


def test_scalar_broadcast_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = tsum(2.0 * a)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, np.full((2, 2), 2.0))


def test_ndarray_left_operand_returns_tensor():
    # regression: numpy must defer to Tensor's reflected ops instead of
    # trying to consume the Tensor element by element
    t = Tensor([1.0, 2.0], requires_grad=True)
    arr = np.asarray([3.0, 4.0])
    for result, expect in [
        (arr * t, [3.0, 8.0]),
        (arr + t, [4.0, 6.0]),
        (arr - t, [2.0, 2.0]),
        (arr / t, [3.0, 2.0]),
    ]:
        assert isinstance(result, Tensor)
        np.testing.assert_allclose(result.data, expect)


def test_ndarray_left_operand_gradient_flows():
    t = Tensor([1.0, 2.0], requires_grad=True)
    arr = np.asarray([3.0, 4.0])
    with Tape() as tape:
        y = tsum(arr * t)
    backward(tape, y)
    np.testing.assert_allclose(t.grad, arr)


def test_div_and_rsub_orientation():
    a = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(1.0 - a) + tsum(8.0 / a)
    backward(tape, y)
    # d/da (1 - a) = -1 ; d/da (8/a) = -8/a^2 = -2
    np.testing.assert_allclose(a.grad, [-3.0])


def test_matmul_gradients():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        y = tsum(matmul(a, b))
    backward(tape, y)
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


def test_transpose_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    g = np.arange(6, dtype=np.float64).reshape(3, 2)
    with Tape() as tape:
        y = tsum(transpose(a) * g)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, g.T)


def test_clip_gradient_zero_at_boundaries():
    a = Tensor([0.0, 0.5, 1.0, -1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(clip(a, 0.0, 1.0))
    backward(tape, y)
    # values at or beyond the clip bounds get zero gradient
    np.testing.assert_allclose(a.grad, [0.0, 1.0, 0.0, 0.0, 0.0])


def test_exp_log_sqrt_values_and_grads():
    a = Tensor([4.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(exp(log(a)))
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [1.0], atol=1e-12)


def test_tsum_axis_keepdims_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        s = tsum(a, axis=1, keepdims=True)  # (2,1)
        y = tsum(s * np.asarray([[2.0], [3.0]]))
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [[2.0] * 3, [3.0] * 3])


def test_tmean_gradient():
    a = Tensor(np.ones(8), requires_grad=True)
    with Tape() as tape:
        y = tmean(a)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, np.full(8, 1.0 / 8.0))


def test_detach_cuts_graph():
    a = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(a.detach() * a)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [2.0])  # only the live branch


def test_intermediate_reused_in_two_branches():
    a = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        h = a * 3.0
        y = tsum(h * h) + tsum(h)
    backward(tape, y)
    # y = 9a^2 + 3a -> dy/da = 18a + 3 = 39
    np.testing.assert_allclose(a.grad, [39.0])


def test_grad_not_written_without_requires_grad():
    a = Tensor([1.0], requires_grad=True)
    c = Tensor([5.0])  # constant
    with Tape() as tape:
        y = tsum(a * c)
    backward(tape, y)
    assert c.grad is None
    np.testing.assert_allclose(a.grad, [5.0])


def test_second_backward_accumulates_into_grad():
    a = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = tsum(a * 2.0)
    backward(tape, y)
    backward(tape, y)
    np.testing.assert_allclose(a.grad, [4.0])
