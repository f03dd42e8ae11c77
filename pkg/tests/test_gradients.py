"""Analytic backward passes vs central finite differences (float64)."""

import numpy as np
import pytest

from flowdet import ops
from flowdet.selfcheck import (
    GRADIENT_CHECKS,
    check_bilinear_warp,
    check_conv2d,
    check_depthwise_separable,
    check_epe_loss,
    check_flow_guided_gru,
    gradient_check,
)
from flowdet.tensor import Tensor, relu, sigmoid, softmax


@pytest.mark.parametrize("name,fn,tol", GRADIENT_CHECKS, ids=[c[0] for c in GRADIENT_CHECKS])
def test_finite_difference_suite(name, fn, tol):
    rng = np.random.default_rng(42)
    worst = max(fn(rng) for _ in range(5))
    assert worst < tol, f"{name}: max relative error {worst:.3e} >= {tol}"


def test_conv2d_tight_tolerance():
    rng = np.random.default_rng(0)
    assert check_conv2d(rng) < 1e-5


def test_warp_flow_gradient_at_subpixel_positions():
    rng = np.random.default_rng(1)
    assert check_bilinear_warp(rng) < 1e-4


def test_leaky_relu_gradient_exact_above_zero():
    x = Tensor(np.array([[[[2.0, 0.5], [3.0, 7.0]]]]), requires_grad=True)
    ops.leaky_relu(x, 0.1).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_leaky_relu_gradient_below_zero():
    x = Tensor(np.array([[[[-2.0]]]]), requires_grad=True)
    ops.leaky_relu(x, 0.1).sum().backward()
    assert x.grad[0, 0, 0, 0] == pytest.approx(0.1)


def test_epe_zero_error_subgradient():
    from flowdet.lightflow import epe_loss

    pred = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    gt = Tensor(np.ones((1, 2, 3, 3)))
    epe_loss(pred, gt).backward()
    np.testing.assert_array_equal(pred.grad, np.zeros_like(pred.data))


def test_batch_norm_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)
    bn = ops.BnParams(gamma=gamma, beta=beta, mean=rng.standard_normal(3), var=rng.uniform(0.5, 2, 3), eps=1e-5)
    err = gradient_check(lambda: ops.batch_norm(x, bn).sum(), [x, gamma, beta])
    assert err < 1e-6


def test_upsample_and_concat_gradients():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 2, 6, 6)))

    def fn():
        return (ops.nearest_upsample_2x(a) * probe).sum() + ops.concat_channels(a, b).sum()

    err = gradient_check(fn, [a, b])
    assert err < 1e-6


def test_crop_gradient_zero_pads():
    x = Tensor(np.random.default_rng(4).standard_normal((1, 1, 4, 4)), requires_grad=True)
    ops.crop_spatial(x, 2, 3).sum().backward()
    assert x.grad[:, :, :2, :3].sum() == 6
    assert x.grad[:, :, 2:, :].sum() == 0 and x.grad[:, :, :, 3:].sum() == 0


def test_elementwise_graph_gradients():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = Tensor(rng.standard_normal((2, 3)), requires_grad=True)

    def fn():
        return (sigmoid(x) * relu(y) + (1.0 - sigmoid(x)) * y * 0.5).sum()

    err = gradient_check(fn, [x, y])
    assert err < 1e-6


def test_fc_and_softmax_gradients():
    from flowdet.tensor import fc

    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    probe = Tensor(rng.standard_normal((3, 5)))

    def fn():
        return (softmax(fc(x, w, b), axis=1) * probe).sum()

    err = gradient_check(fn, [x, w, b])
    assert err < 1e-6


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([[2.0]]), requires_grad=True)
    (x * 3.0 + x * 2.0).sum().backward()
    assert x.grad[0, 0] == pytest.approx(5.0)


def test_no_grad_suppresses_graph():
    from flowdet.tensor import no_grad

    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        out = ops.leaky_relu(x, 0.1)
    assert out._backward is None and out._prev == ()
