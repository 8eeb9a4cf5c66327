import numpy as np
import pytest

from stnadapt.autodiff import (
    NumericsError,
    ShapeError,
    Tensor,
    add,
    finite_difference_gradient,
    grads_for,
    matmul,
    mul,
    relative_gradient_error,
    repeat_batch,
    tensor_sum,
)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)


def test_accumulation_is_additive():
    a = Tensor(np.ones(4), requires_grad=True)
    tensor_sum(add(a, a)).backward()
    assert np.allclose(a.grad, 2.0)


def test_matmul_shape():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 4)))
    assert matmul(a, b).shape == (2, 4)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_non_scalar_loss_rejected():
    v = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        add(v, v).backward()


def test_linear_loss_gradient_is_input():
    x = np.array([1.0, -2.0, 0.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    tensor_sum(mul(w, Tensor(x))).backward()
    assert np.allclose(w.grad, x)


def test_unreachable_parameter_gets_zero_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    p = Tensor(np.ones(5), requires_grad=True)
    loss = tensor_sum(mul(w, w))
    grads = grads_for(loss, {"w": w, "p": p})
    assert np.allclose(grads["w"], 2.0)
    assert np.array_equal(grads["p"], np.zeros(5))


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 4))

    def run():
        t = Tensor(x.copy(), requires_grad=True)
        tensor_sum(mul(mul(t, t), t)).backward()
        return t.grad

    assert np.array_equal(run(), run())


def test_repeat_batch_backward_sums_copies():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    out = repeat_batch(a, 4)
    assert out.shape == (8, 3)
    tensor_sum(out).backward()
    assert np.allclose(a.grad, 4.0)


def test_finite_difference_on_square():
    g = finite_difference_gradient(lambda x: float(x**2), np.array(3.0))
    assert g == pytest.approx(6.0, abs=1e-8)


def test_finite_difference_constant_function():
    g = finite_difference_gradient(lambda x: 1.25, np.ones((2, 3)))
    assert np.array_equal(g, np.zeros((2, 3)))


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: 0.0, np.zeros(1), h=0.0)


def test_finite_difference_reports_nonfinite():
    with pytest.raises(NumericsError):
        finite_difference_gradient(lambda x: float("nan"), np.zeros(2))


def test_relative_gradient_error_scale():
    assert relative_gradient_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_gradient_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
