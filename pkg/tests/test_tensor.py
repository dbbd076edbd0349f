import numpy as np
import pytest

from sacseg import ops
from sacseg.tensor import (ShapeError, Tensor, default_dtype, get_default_dtype, no_grad, parameter,
                           set_default_dtype)


def test_default_precision_is_double():
    assert get_default_dtype() == np.float64
    assert Tensor([1.0, 2.0]).dtype == np.float64


def test_single_precision_selectable():
    with default_dtype(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert get_default_dtype() == np.float64


def test_rejects_other_dtypes():
    with pytest.raises(ValueError):
        set_default_dtype(np.int32)


def test_size_matches_shape():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.size == 24 and t.shape == (2, 3, 4)


def test_backward_of_sum_is_ones(rng):
    x = parameter(rng.normal(size=(2, 3)))
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares(rng):
    x = parameter(rng.normal(size=(3, 4)))
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)


def test_grad_has_data_shape(rng):
    x = parameter(rng.normal(size=(2, 1, 3)))
    y = parameter(rng.normal(size=(4, 3)))
    ops.sum(ops.mul(x, y)).backward()
    assert x.grad.shape == x.shape and y.grad.shape == y.shape


def test_backward_requires_scalar(rng):
    x = parameter(rng.normal(size=(2, 2)))
    with pytest.raises(ShapeError):
        ops.mul(x, 2.0).backward()


def test_every_ancestor_gets_grad(rng):
    a, b, c = (parameter(rng.normal(size=(3,))) for _ in range(3))
    loss = ops.sum(ops.mul(ops.add(a, b), ops.sigmoid(c)))
    loss.backward()
    assert all(t.grad is not None for t in (a, b, c))


def test_graph_released_after_backward(rng):
    x = parameter(rng.normal(size=(3,)))
    y = ops.sum(ops.exp(x))
    y.backward()
    assert y._parents == () and y._backward is None


def test_gradients_accumulate_across_reuse(rng):
    x = parameter(rng.normal(size=(3,)))
    ops.sum(ops.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_no_grad_records_nothing(rng):
    x = parameter(rng.normal(size=(3,)))
    with no_grad():
        y = ops.exp(x)
    assert not y.requires_grad


def test_deep_chain_does_not_recurse(rng):
    x = parameter(np.ones(2))
    y = x
    for _ in range(5000):
        y = ops.add(y, 1.0)
    ops.sum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones(2))
