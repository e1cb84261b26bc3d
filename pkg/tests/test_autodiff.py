"""Reverse-mode gradients against central finite differences.

All checks run in float64 (the 32-bit default is too coarse for difference
quotients) with step 1e-3 and demand max relative error below 1e-4.
"""

import numpy as np
import pytest

from condconv import Tensor, ShapeError
from condconv import ops
from condconv.layers import ConvKind, ExecutionStrategy, ExpertBank, condconv_forward
from condconv.tensor import gradients
from conftest import finite_difference, max_rel_err

GRAD_TOL = 1e-4
FD_STEP = 1e-3


def check_op(make_loss, params, h=FD_STEP, tol=GRAD_TOL):
    """Autodiff gradient of make_loss() vs central differences, per param."""
    for p in params:
        p.zero_grad()
    loss = make_loss()
    loss.backward()
    for p in params:
        fd = finite_difference(lambda: make_loss().item(), p.data, h=h)
        err = max_rel_err(p.grad_array(), fd)
        assert err < tol, f"gradient mismatch {err:.3e} for param {p.shape}"


def rand_tensor(rng, shape, requires_grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self, f64):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        ops.tsum(w).backward()
        assert np.array_equal(w.grad, np.ones((3, 4)))

    def test_non_scalar_loss_rejected(self, f64):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            ops.mul(w, w).backward()

    def test_unreached_parameter_gets_zero_gradient(self, f64):
        rng = np.random.default_rng(1)
        used = rand_tensor(rng, (3,), requires_grad=True)
        unused = rand_tensor(rng, (2, 2), requires_grad=True)
        loss = ops.tsum(ops.mul(used, used))
        grads = gradients(loss, [used, unused])
        assert np.array_equal(grads[1], np.zeros((2, 2)))
        assert np.allclose(grads[0], 2 * used.data)

    def test_reuse_accumulates(self, f64):
        w = Tensor(np.full((2,), 3.0), requires_grad=True)
        loss = ops.tsum(ops.add(w, w))
        loss.backward()
        assert np.allclose(w.grad, 2.0)

    def test_conv_of_constant_input(self, f64):
        # every kernel tap sees the constant c at each of the Ho*Wo positions
        x = Tensor(np.full((1, 4, 4, 1), 2.0))
        w = Tensor(np.random.default_rng(2).normal(size=(3, 3, 1, 1)), requires_grad=True)
        loss = ops.tsum(ops.conv2d(x, w, 1, "valid"))
        loss.backward()
        fd = finite_difference(
            lambda: ops.conv2d(x, w, 1, "valid").data.sum(), w.data
        )
        assert max_rel_err(w.grad, fd) < GRAD_TOL
        assert np.allclose(w.grad, 2.0 * 4)  # 2x2 output positions, input 2.0


@pytest.mark.parametrize("trial", range(50))
def test_elementwise_and_dense_ops_random_shapes(f64, trial):
    rng = np.random.default_rng(100 + trial)
    m, k, n = rng.integers(1, 7, size=3)
    a = rand_tensor(rng, (m, k), requires_grad=True)
    b = rand_tensor(rng, (k, n), requires_grad=True)
    c = rand_tensor(rng, (m, n), requires_grad=True)
    bias = rand_tensor(rng, (n,), requires_grad=True)

    def loss():
        out = ops.matmul(a, b)
        out = ops.add_bias(out, bias)
        out = ops.mul(out, c)
        out = ops.relu(ops.add(out, c))
        return ops.tsum(ops.sigmoid(out))

    check_op(loss, [a, b, c, bias])


@pytest.mark.parametrize("trial", range(12))
def test_conv2d_gradients_random_shapes(f64, trial):
    rng = np.random.default_rng(200 + trial)
    b = int(rng.integers(1, 3))
    h, w = rng.integers(3, 7, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    padding = str(rng.choice(["same", "valid"]))
    if padding == "valid" and (k > h or k > w):
        k = 1
    x = rand_tensor(rng, (b, h, w, cin), requires_grad=True)
    kern = rand_tensor(rng, (k, k, cin, cout), requires_grad=True)

    def loss():
        return ops.tsum(ops.sigmoid(ops.conv2d(x, kern, stride, padding)))

    check_op(loss, [x, kern])


@pytest.mark.parametrize("trial", range(8))
def test_depthwise_gradients_random_shapes(f64, trial):
    rng = np.random.default_rng(300 + trial)
    b = int(rng.integers(1, 3))
    h, w = rng.integers(3, 7, size=2)
    c = int(rng.integers(1, 5))
    stride = int(rng.choice([1, 2]))
    x = rand_tensor(rng, (b, h, w, c), requires_grad=True)
    kern = rand_tensor(rng, (3, 3, c, 1), requires_grad=True)

    def loss():
        return ops.tsum(ops.sigmoid(ops.depthwise_conv2d(x, kern, stride, "same")))

    check_op(loss, [x, kern])


@pytest.mark.parametrize("trial", range(6))
def test_per_example_kernel_ops_gradients(f64, trial):
    rng = np.random.default_rng(400 + trial)
    b, h, c, cout = 2, 5, 2, 3
    x = rand_tensor(rng, (b, h, h, c), requires_grad=True)
    kerns = rand_tensor(rng, (b, 3, 3, c, cout), requires_grad=True)
    dkerns = rand_tensor(rng, (b, 3, 3, c, 1), requires_grad=True)

    def loss_std():
        return ops.tsum(ops.sigmoid(ops.conv2d_per_example(x, kerns, 1, "same")))

    def loss_dw():
        return ops.tsum(ops.sigmoid(ops.depthwise_conv2d_per_example(x, dkerns, 2, "same")))

    check_op(loss_std, [x, kerns])
    check_op(loss_dw, [x, dkerns])


def test_pool_softmax_slicing_gradients(f64):
    rng = np.random.default_rng(500)
    x = rand_tensor(rng, (2, 4, 4, 3), requires_grad=True)
    w = rand_tensor(rng, (3, 4), requires_grad=True)

    def loss():
        pooled = ops.global_average_pool(x)
        logits = ops.matmul(pooled, w)
        soft = ops.softmax(logits, axis=-1)
        picked = ops.column(soft, 1)
        return ops.tsum(ops.mul(picked, picked))

    check_op(loss, [x, w])


def test_log_softmax_and_cross_entropy_gradients(f64):
    rng = np.random.default_rng(501)
    logits = rand_tensor(rng, (4, 5), requires_grad=True)
    labels = np.zeros((4, 5))
    labels[np.arange(4), [0, 2, 4, 1]] = 1.0
    targets = Tensor(labels)

    def loss():
        return ops.cross_entropy_with_logits(logits, targets)

    check_op(loss, [logits])


def test_batch_scale_and_concat_gradients(f64):
    rng = np.random.default_rng(502)
    x = rand_tensor(rng, (3, 2, 2, 2), requires_grad=True)
    s = rand_tensor(rng, (3,), requires_grad=True)
    a = rand_tensor(rng, (3, 2), requires_grad=True)
    b = rand_tensor(rng, (3, 3), requires_grad=True)

    def loss():
        scaled = ops.batch_scale(x, s)
        feats = ops.concat_features(a, b)
        return ops.add(ops.tsum(ops.sigmoid(scaled)), ops.tsum(ops.sigmoid(feats)))

    check_op(loss, [x, s, a, b])


def test_channel_scale_shift_gradients(f64):
    rng = np.random.default_rng(503)
    x = rand_tensor(rng, (2, 3, 3, 4), requires_grad=True)
    gamma = rand_tensor(rng, (4,), requires_grad=True)
    beta = rand_tensor(rng, (4,), requires_grad=True)

    def loss():
        return ops.tsum(ops.sigmoid(ops.channel_scale_shift(x, gamma, beta)))

    check_op(loss, [x, gamma, beta])


class TestCondConvLayerGradients:
    """Gradients flow through both the experts and the routing matrix."""

    @pytest.mark.parametrize("strategy", [ExecutionStrategy.FUSED, ExecutionStrategy.BRANCHED_MOE])
    def test_full_layer_finite_difference(self, f64, strategy):
        rng = np.random.default_rng(600)
        bank = ExpertBank.create(ConvKind.STANDARD, 3, (3, 3, 2, 2), 2, rng)
        bank.routing.data = 0.5 * rng.normal(size=bank.routing.shape)
        x = Tensor(rng.normal(size=(2, 5, 5, 2)))

        def loss():
            out = condconv_forward(x, bank, strategy=strategy, stride=1, padding="same")
            return ops.tsum(ops.sigmoid(out))

        check_op(loss, [bank.experts, bank.routing])

    def test_strategies_produce_matching_gradients(self, f64):
        rng = np.random.default_rng(601)
        bank = ExpertBank.create(ConvKind.DEPTHWISE, 4, (3, 3, 3, 1), 3, rng)
        bank.routing.data = 0.5 * rng.normal(size=bank.routing.shape)
        x = Tensor(rng.normal(size=(2, 4, 4, 3)))
        grads = {}
        for strategy in (ExecutionStrategy.FUSED, ExecutionStrategy.BRANCHED_MOE):
            bank.experts.zero_grad()
            bank.routing.zero_grad()
            out = condconv_forward(x, bank, strategy=strategy, stride=1, padding="same")
            ops.tsum(ops.sigmoid(out)).backward()
            grads[strategy] = (bank.experts.grad.copy(), bank.routing.grad.copy())
        ge_f, gr_f = grads[ExecutionStrategy.FUSED]
        ge_b, gr_b = grads[ExecutionStrategy.BRANCHED_MOE]
        assert max_rel_err(ge_f, ge_b) < GRAD_TOL
        assert max_rel_err(gr_f, gr_b) < GRAD_TOL
