"""Reverse-mode autodiff: primitive gradients, graph semantics and second-order use."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from splitfield import autodiff as ad
from splitfield.autodiff import GraphError, ShapeError, Tensor


def leaf(rng, *shape, positive=False):
    v = rng.normal(size=shape)
    return Tensor(np.abs(v) + 0.5 if positive else v, requires_grad=True)


UNARY = {
    "relu": (ad.relu, False),
    "exp": (ad.exp, False),
    "sigmoid": (ad.sigmoid, False),
    "softplus": (ad.softplus, False),
    "sin": (ad.sin, False),
    "cos": (ad.cos, False),
    "square": (ad.square, False),
    "sqrt": (ad.sqrt, True),
    "reciprocal": (ad.reciprocal, True),
    "neg": (lambda a: -a, False),
    "transpose": (ad.transpose, False),
}


class TestPrimitiveGradients:
    """Each primitive matches central differences in float64."""

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, rng, name):
        op, positive = UNARY[name]
        x = leaf(rng, 3, 4, positive=positive)
        w = rng.normal(size=op(Tensor(x.value)).shape)
        err = ad.grad_check(lambda: ad.sum(ad.mul(op(x), Tensor(w))), [x])
        assert err < 1e-6

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
    def test_binary(self, rng, op):
        a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
        w = rng.normal(size=(4, 3))
        assert ad.grad_check(lambda: ad.sum(ad.mul(op(a, b), Tensor(w))), [a, b]) < 1e-6

    def test_bias_add(self, rng):
        x, b = leaf(rng, 5, 3), leaf(rng, 3)
        w = rng.normal(size=(5, 3))
        assert ad.grad_check(lambda: ad.sum(ad.mul(ad.add(x, b), Tensor(w))), [x, b]) < 1e-6

    def test_matmul(self, rng):
        a, b = leaf(rng, 4, 3), leaf(rng, 3, 2)
        assert ad.grad_check(lambda: ad.squared_norm(ad.matmul(a, b)), [a, b]) < 1e-6

    def test_reductions(self, rng):
        x = leaf(rng, 3, 4, 2)
        w = rng.normal(size=(3, 2))
        for f in (
            lambda: ad.sum(ad.mul(ad.sum(x, axis=1), Tensor(w))),
            lambda: ad.sum(ad.square(ad.sum(x, axis=2, keepdims=True))),
            lambda: ad.mean(ad.square(x)),
            lambda: ad.norm(x),
        ):
            assert ad.grad_check(f, [x]) < 1e-6

    def test_reshape_broadcast(self, rng):
        x = leaf(rng, 2, 3)
        w = rng.normal(size=(4, 2, 3))
        f = lambda: ad.sum(ad.mul(ad.broadcast_to(ad.reshape(x, (1, 2, 3)), (4, 2, 3)), Tensor(w)))
        assert ad.grad_check(f, [x]) < 1e-6

    def test_take_and_scatter(self, rng):
        x = leaf(rng, 5, 2)
        idx = np.array([0, 3, 3, 1])
        w = rng.normal(size=(4, 2))
        assert ad.grad_check(lambda: ad.sum(ad.mul(ad.take(x, idx), Tensor(w))), [x]) < 1e-6
        y = leaf(rng, 4, 2)
        w2 = rng.normal(size=(6, 2))
        assert ad.grad_check(lambda: ad.sum(ad.mul(ad.scatter_add(y, idx, 6), Tensor(w2))), [y]) < 1e-6


class TestKnownValues:
    """Hand-derived gradients."""

    def test_polynomial(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        ad.backward(ad.sum(x * x * x + 3.0 * x))
        assert_allclose(x.grad, [3 * 4 + 3])

    def test_relu_zero_subgradient(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        ad.backward(ad.sum(ad.relu(x)))
        assert_allclose(x.grad, [0.0, 0.0, 1.0])

    def test_softplus_stable(self):
        x = Tensor(np.array([-800.0, 0.0, 800.0]), requires_grad=True)
        y = ad.softplus(x)
        assert np.all(np.isfinite(y.value))
        assert_allclose(y.value, [0.0, np.log(2.0), 800.0])
        ad.backward(ad.sum(y))
        assert_allclose(x.grad, [0.0, 0.5, 1.0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        y = ad.exp(x)
        ad.backward(ad.sum(y * y))
        assert_allclose(x.grad, 2 * np.exp(3.0))


class TestGraphSemantics:
    """Error reporting and bookkeeping."""

    def test_non_scalar_root(self, rng):
        with pytest.raises(GraphError):
            ad.backward(leaf(rng, 2))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.add(leaf(rng, 2, 3), leaf(rng, 3, 2))
        with pytest.raises(ShapeError):
            ad.matmul(leaf(rng, 2, 3), leaf(rng, 2, 3))

    def test_no_grad_builds_no_graph(self, rng):
        x = leaf(rng, 3)
        with ad.no_grad():
            y = ad.sum(ad.exp(x))
        assert not y.requires_grad and y.vjp is None

    def test_constants_get_no_grad(self, rng):
        x, c = leaf(rng, 3), Tensor(np.ones(3))
        ad.backward(ad.sum(ad.mul(x, c)))
        assert c.grad is None
        assert_allclose(x.grad, np.ones(3))

    def test_grads_overwrite_between_calls(self, rng):
        x = leaf(rng, 3)
        ad.backward(ad.sum(x))
        ad.backward(ad.sum(x))
        assert_allclose(x.grad, np.ones(3))

    def test_graph_freed_unless_retained(self, rng):
        x = leaf(rng, 3)
        mid = ad.exp(x)
        ad.backward(ad.sum(mid))
        assert mid.vjp is None and mid.parents == ()
        mid2 = ad.exp(x)
        ad.backward(ad.sum(mid2), retain_graph=True)
        assert mid2.vjp is not None

    def test_custom_primitive(self, rng):
        x = leaf(rng, 4)
        cube = ad.make_node(x.value**3, [x], lambda g, needed: (ad.mul(g, Tensor(3 * x.value**2)),))
        ad.backward(ad.sum(cube))
        assert_allclose(x.grad, 3 * x.value**2)

    def test_grad_check_rejects_bad_step(self, rng):
        x = leaf(rng, 2)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.sum(x), [x], step=0.0)


class TestSecondOrder:
    """Gradients expressed as graphs can be differentiated again."""

    def test_hessian_vector_of_cubic(self, rng):
        x = leaf(rng, 4)
        (g,) = [ad.backward_as_graph(ad.sum(x * x * x), [x])[0]]
        assert_allclose(g.value, 3 * x.value**2)
        v = rng.normal(size=4)
        ad.backward(ad.sum(ad.mul(g, Tensor(v))))
        assert_allclose(x.grad, 6 * x.value * v)

    def test_gradient_matching_loss_fd(self, rng):
        """d/dw ||d(sum(w*x*e))/de - target||^2 checked by finite differences."""
        w, e = leaf(rng, 3, 2), leaf(rng, 5, 3)
        target = rng.normal(size=(5, 3))

        def f():
            out = ad.sum(ad.sigmoid(ad.matmul(e, w)))
            g = ad.backward_as_graph(out, e)
            return ad.squared_norm(ad.sub(g, Tensor(target)))

        assert ad.grad_check(f, [w]) < 1e-5

    def test_unreachable_target(self, rng):
        x, y = leaf(rng, 2), leaf(rng, 2)
        with pytest.raises(GraphError):
            ad.backward_as_graph(ad.sum(x), y)
