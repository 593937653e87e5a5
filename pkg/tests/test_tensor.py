import numpy as np
import pytest

from plantscan import tensor


def test_as_tensor_default_dtype():
    t = tensor.as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    assert t.shape == (2, 2)


def test_as_tensor_preserves_requested_dtype():
    t = tensor.as_tensor([1.0, 2.0], dtype=np.float64)
    assert t.dtype == np.float64


def test_matmul_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    b = np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float32)
    out = tensor.matmul(a, b)
    assert np.array_equal(out, np.array([[19.0, 22.0], [43.0, 50.0]], dtype=np.float32))


def test_matmul_shape_mismatch_message():
    a = np.zeros((2, 3), dtype=np.float32)
    b = np.zeros((4, 2), dtype=np.float32)
    with pytest.raises(ValueError) as exc:
        tensor.matmul(a, b)
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_rejects_non_2d():
    with pytest.raises(ValueError):
        tensor.matmul(np.zeros(3, dtype=np.float32), np.zeros((3, 2), dtype=np.float32))


def test_relu_example():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0], dtype=np.float32)
    assert np.array_equal(tensor.relu(x),
                          np.array([0.0, 0.0, 0.0, 0.5, 2.0], dtype=np.float32))


def test_relu_grad_zero_at_zero():
    x = np.array([-1.0, 0.0, 1.0], dtype=np.float32)
    up = np.ones_like(x)
    assert np.array_equal(tensor.relu_grad(x, up),
                          np.array([0.0, 0.0, 1.0], dtype=np.float32))


def test_softmax_example():
    x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    p = tensor.softmax(x)
    expected = np.array([0.09003057, 0.24472847, 0.66524096])
    assert np.allclose(p[0], expected, atol=1e-6)
    assert abs(float(p.sum()) - 1.0) < 1e-6


def test_softmax_shift_invariance():
    x = np.array([[1000.0, 1001.0, 1002.0]], dtype=np.float32)
    p = tensor.softmax(x)
    assert np.all(np.isfinite(p))
    q = tensor.softmax(np.array([[0.0, 1.0, 2.0]], dtype=np.float32))
    assert np.allclose(p, q, atol=1e-6)


def test_softmax_grad_matches_jacobian():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    p = tensor.softmax(x)
    up = rng.standard_normal((3, 5))
    got = tensor.softmax_grad(p, up)
    for i in range(3):
        jac = np.diag(p[i]) - np.outer(p[i], p[i])
        assert np.allclose(got[i], jac @ up[i], atol=1e-10)


def test_softmax_grad_of_uniform_upstream_is_zero():
    # sum of softmax is constant 1, so its gradient is exactly zero
    p = tensor.softmax(np.random.default_rng(1).standard_normal((2, 4)))
    g = tensor.softmax_grad(p, np.ones_like(p))
    assert np.allclose(g, 0.0, atol=1e-12)


def test_gradient_tape_accumulates():
    tape = tensor.GradientTape()
    tape.accumulate("w", np.ones((2, 2)))
    tape.accumulate("w", 2 * np.ones((2, 2)))
    assert np.array_equal(tape["w"], 3 * np.ones((2, 2)))


def test_gradient_tape_shape_mismatch():
    tape = tensor.GradientTape()
    tape.accumulate("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        tape.accumulate("w", np.ones((3, 3)))
