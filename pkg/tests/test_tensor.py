import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, broadcastable_shapes

from mtaffect.gradcheck import check_gradients, numerical_gradient, relative_error
from mtaffect.tensor import (ShapeError, Tensor, backward, concat, default_dtype, parameter, precision, stack,
                             topological_order)


def p64(a, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def test_default_dtype_and_precision_context():
    assert default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert default_dtype() == np.float32


def test_precision_restored_after_error():
    with pytest.raises(RuntimeError):
        with precision("float64"):
            raise RuntimeError("boom")
    assert default_dtype() == np.float32


def test_shared_node_accumulates():
    # d/dx (x*x + x) = 2x + 1
    x = p64([1.5, -2.0])
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, -3.0])


def test_broadcast_gradient_reduces_to_operand_shape():
    a = p64(np.ones((3, 4)))
    b = p64(np.arange(4.0))
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))
    np.testing.assert_allclose(a.grad, np.broadcast_to(np.arange(4.0), (3, 4)))


def test_matmul_gradients_match_closed_form(rng):
    a, b = p64(rng.normal(size=(3, 5))), p64(rng.normal(size=(5, 2)))
    g = rng.normal(size=(3, 2))
    ((a @ b) * g).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_getitem_scatters_gradient():
    x = p64(np.arange(6.0).reshape(2, 3))
    (x[:, 1] * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 2, 0], [0, 2, 0]])


def test_concat_and_stack_split_gradients():
    a, b = p64(np.ones((2, 2))), p64(np.ones((2, 3)))
    (concat([a, b], axis=1) * np.arange(5.0)).sum().backward()
    np.testing.assert_array_equal(a.grad, [[0, 1], [0, 1]])
    np.testing.assert_array_equal(b.grad, [[2, 3, 4], [2, 3, 4]])
    c, d = p64([1.0, 2.0]), p64([3.0, 4.0])
    (stack([c, d]) * np.array([[1.0], [10.0]])).sum().backward()
    np.testing.assert_array_equal(c.grad, [1, 1])
    np.testing.assert_array_equal(d.grad, [10, 10])


def test_detach_blocks_gradient():
    x = p64([2.0])
    y = x * x.detach()
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0])


def test_topological_order_parents_first():
    x = p64([1.0])
    y = x * 2.0
    z = y + x
    order = topological_order(z)
    assert order.index(x) < order.index(y) < order.index(z)


def test_backward_returns_zero_for_unused_parameter():
    x, unused = p64([1.0, 2.0]), p64([5.0])
    grads = backward((x * 3.0).sum(), [x, unused])
    np.testing.assert_array_equal(grads[0], [3.0, 3.0])
    np.testing.assert_array_equal(grads[1], [0.0])


def test_concat_rejects_mismatch():
    with pytest.raises((ShapeError, ValueError)):
        concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=1)


def test_elementwise_gradients_against_finite_differences():
    rng = np.random.default_rng(0)
    with precision("float64"):
        x = parameter(rng.uniform(0.5, 1.5, size=(3, 4)), "x")
        y = parameter(rng.normal(size=(4,)), "y")

        def loss():
            h = (x * y).tanh() + (x ** 1.5).sqrt() - (y.sigmoid() / x) + x.exp().mean(axis=0)
            return (h.relu() * h).sum() + (x.T @ x).mean()
        errs = check_gradients(loss, [x, y], h=1e-5, max_entries=None)
    assert max(errs.values()) < 1e-6


def test_numerical_gradient_of_quadratic_is_exact():
    with precision("float64"):
        w = parameter(np.array([1.0, -2.0, 0.5]), "w")
        _, est = numerical_gradient(lambda: float(np.sum(w.data ** 2)), w)
    np.testing.assert_allclose(est, 2 * w.data, rtol=1e-9)
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-8])) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_binary_op_broadcast_gradients(data):
    shapes = data.draw(broadcastable_shapes(shape=(3, 4), min_dims=0, max_dims=2, min_side=1))
    a_shape, b_shape = (3, 4), shapes
    elems = st.floats(0.5, 2.0)
    a = p64(data.draw(arrays(np.float64, a_shape, elements=elems)))
    b = p64(data.draw(arrays(np.float64, b_shape, elements=elems)))
    op = data.draw(st.sampled_from(["add", "sub", "mul", "div"]))
    f = {"add": lambda u, v: u + v, "sub": lambda u, v: u - v, "mul": lambda u, v: u * v,
         "div": lambda u, v: u / v}[op]
    out = f(a, b)
    out.sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    # oracle: analytic partials summed over broadcast axes
    av, bv = np.broadcast_arrays(a.data, b.data)
    da, db = {"add": (1.0, 1.0), "sub": (1.0, -1.0), "mul": (bv, av), "div": (1.0 / bv, -av / bv ** 2)}[op]
    np.testing.assert_allclose(b.grad, _reduce_to(np.ones_like(av) * db, b.shape), rtol=1e-12)
    np.testing.assert_allclose(a.grad, np.ones_like(av) * da, rtol=1e-12)


def _reduce_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g
