"""Autodiff engine: chain rule, finite-difference agreement, graph rules."""

import numpy as np
import pytest

from mixquant.tensor import Tensor, grad_map, softmax

from helpers import assert_grad_close, central_difference, softmax_np


def test_product_rule_scalars():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(4.0, requires_grad=True)
    (x * y).backward()
    assert x.grad == pytest.approx(4.0)
    assert y.grad == pytest.approx(3.0)


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_random_three_op_graph_matches_finite_differences():
    rng = np.random.default_rng(7)
    xd = rng.uniform(-1, 1, size=(4, 3))
    yd = rng.uniform(-1, 1, size=(4, 3))

    def run():
        x = Tensor(xd, requires_grad=True)
        y = Tensor(yd, requires_grad=True)
        loss = ((x * y + x).relu()).sum()
        return x, y, loss

    x, y, loss = run()
    loss.backward()
    fd_x, fd_y = central_difference(lambda: run()[2].item(), [xd, yd])
    assert_grad_close(x.grad, fd_x)
    assert_grad_close(y.grad, fd_y)


def test_reused_tensor_accumulates():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    ((x * x + x).sum()).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_unreachable_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    orphan = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = x.sum()
    grads = grad_map(loss, [x, orphan])
    np.testing.assert_array_equal(grads[id(x)], np.ones(2))
    np.testing.assert_array_equal(grads[id(orphan)], np.zeros((2, 2)))


def test_topological_order_visits_each_node_once():
    x = Tensor(2.0, requires_grad=True)
    a = x * x
    loss = (a + a) + x  # diamond: `a` referenced twice
    order = loss.topo_order()
    assert len(order) == len({id(n) for n in order})
    assert order.index(x) < order.index(a)
    loss.backward()
    # d/dx (2x^2 + x) = 4x + 1
    assert x.grad == pytest.approx(9.0)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_ops_match_finite_differences(op):
    rng = np.random.default_rng(11)
    ad = rng.uniform(0.5, 1.5, size=(3, 4))
    bd = rng.uniform(0.5, 1.5, size=(4,))

    def build():
        a = Tensor(ad, requires_grad=True)
        b = Tensor(bd, requires_grad=True)
        c = {
            "add": a + b, "sub": a - b, "mul": a * b, "div": a / b,
        }[op]
        return a, b, (c * c).sum()

    a, b, loss = build()
    loss.backward()
    fd_a, fd_b = central_difference(lambda: build()[2].item(), [ad, bd])
    assert_grad_close(a.grad, fd_a)
    assert_grad_close(b.grad, fd_b)


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(3)
    ad = rng.uniform(-1, 1, size=(3, 4))
    bd = rng.uniform(-1, 1, size=(4, 2))

    def build():
        a = Tensor(ad, requires_grad=True)
        b = Tensor(bd, requires_grad=True)
        return a, b, ((a @ b) ** 2).sum()

    a, b, loss = build()
    loss.backward()
    fd_a, fd_b = central_difference(lambda: build()[2].item(), [ad, bd])
    assert_grad_close(a.grad, fd_a)
    assert_grad_close(b.grad, fd_b)


def test_matmul_shape_error():
    with pytest.raises(ValueError, match="2-D"):
        Tensor(np.ones((2, 3, 4))) @ Tensor(np.ones((4, 2)))


@pytest.mark.parametrize("fn_name", ["relu", "exp", "log", "abs"])
def test_unary_ops_match_finite_differences(fn_name):
    rng = np.random.default_rng(5)
    xd = rng.uniform(0.1, 1.0, size=(5,))  # positive keeps log in-domain

    def build():
        x = Tensor(xd, requires_grad=True)
        return x, getattr(x, fn_name)().sum()

    x, loss = build()
    loss.backward()
    (fd,) = central_difference(lambda: build()[1].item(), [xd])
    assert_grad_close(x.grad, fd)


def test_pow_and_mean_and_reshape():
    rng = np.random.default_rng(9)
    xd = rng.uniform(0.2, 1.0, size=(2, 6))

    def build():
        x = Tensor(xd, requires_grad=True)
        return x, ((x ** 3).reshape(3, 4).mean())

    x, loss = build()
    loss.backward()
    (fd,) = central_difference(lambda: build()[1].item(), [xd])
    assert_grad_close(x.grad, fd)


def test_getitem_gradient_scatter():
    xd = np.arange(6.0)

    def build():
        x = Tensor(xd, requires_grad=True)
        return x, (x[2] * 3.0 + x[2] + x[5])

    x, loss = build()
    loss.backward()
    np.testing.assert_allclose(x.grad, [0, 0, 4.0, 0, 0, 1.0])


def test_softmax_normalization_and_gradient():
    rng = np.random.default_rng(13)
    xd = rng.normal(size=(4, 5))

    def build():
        x = Tensor(xd, requires_grad=True)
        p = softmax(x, axis=-1)
        return x, p, ((p * p).sum())

    x, p, loss = build()
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.data, softmax_np(xd))
    loss.backward()
    (fd,) = central_difference(lambda: build()[2].item(), [xd])
    assert_grad_close(x.grad, fd)


def test_softmax_saturates_for_extreme_logits():
    p = softmax(Tensor(np.array([40.0, -40.0])))
    np.testing.assert_allclose(p.data, [1.0, 0.0], atol=1e-12)


def test_backward_deterministic():
    def one_run():
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        y = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        ((x @ y).relu().sum() * 0.5).backward()
        return x.grad.copy(), y.grad.copy()

    gx1, gy1 = one_run()
    gx2, gy2 = one_run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gy1, gy2)


def test_constant_subgraph_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))  # constant
    (x * c).sum().backward()
    np.testing.assert_array_equal(x.grad, c.data)
    assert c.grad is None
