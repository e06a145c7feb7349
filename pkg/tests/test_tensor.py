import numpy as np
import pytest

from src.morphdiff.errors import ShapeError
from src.morphdiff.tensor import Tape, Tensor, backward, current_tape, default_dtype, elementwise, matmul, no_grad


def test_add_values():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_broadcast_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_mul_by_zero_gives_zero_gradient():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    with Tape():
        out = elementwise("mul", x, 0.0)
        backward(out.sum())
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_silu_values():
    out = elementwise("silu", Tensor([0.0, 10.0]))
    assert out.data[0] == 0.0
    assert out.data[1] == pytest.approx(9.99955, abs=1e-4)


def test_sqrt_and_log_reject_invalid_inputs():
    with pytest.raises(ValueError, match="sqrt"):
        elementwise("sqrt", Tensor([-1.0]))
    with pytest.raises(ValueError, match="log"):
        elementwise("log", Tensor([0.0]))


def test_matmul_identity_and_hand_product():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), x).data, x.data)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    with Tape():
        backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_gradients_accumulate_over_reused_leaf():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        backward((x * 2.0 + x * 5.0).sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = x * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            backward(y)


def test_second_backward_on_same_graph_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(RuntimeError, match="already ran"):
            backward(loss)


def test_tape_records_only_when_gradients_needed():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([2.0])
    with Tape() as tape:
        _ = c * c
        assert len(tape) == 0
        with no_grad():
            y = x * c
        assert len(tape) == 0
        assert not y.requires_grad
        _ = x * c
        assert len(tape) == 1


def test_default_dtype_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_scaling_by_powers_of_two_is_associative():
    a = Tensor(np.random.default_rng(5).standard_normal(16))
    left = (a * 0.25) * 8.0
    right = a * (0.25 * 8.0)
    np.testing.assert_array_equal(left.data, right.data)


def test_forward_is_deterministic():
    data = np.random.default_rng(9).standard_normal((4, 4))
    a = (Tensor(data).silu() @ Tensor(data)).sum().data
    b = (Tensor(data).silu() @ Tensor(data)).sum().data
    assert a.tobytes() == b.tobytes()


def test_ops_outside_a_tape_are_not_recorded():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert current_tape() is None
    y = (x * x).sum()
    assert not y.requires_grad
    with pytest.raises(RuntimeError, match="not on a tape"):
        backward(y)
    with Tape() as tape:
        assert current_tape() is tape
        backward((x * x).sum())
    assert current_tape() is None
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
