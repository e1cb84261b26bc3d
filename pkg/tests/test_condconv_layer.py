"""The conditional convolution layer: routing, mixing, and the equivalence
of the fused and branched execution strategies."""

import math

import numpy as np
import pytest

from condconv import Tensor, ConfigError
from condconv import ops
from condconv.layers import (
    ConvKind,
    ExecutionStrategy,
    ExpertBank,
    combine_kernels,
    condconv_fc,
    condconv_forward,
    route,
    select_strategy,
    validate_routing_weights,
)
from condconv.tensor import ShapeError
from conftest import max_rel_err, scale_rel_err


def make_bank(rng, kind, n, shape, routed, random_routing=True):
    bank = ExpertBank.create(kind, n, shape, routed, rng)
    if random_routing:
        bank.routing.data = (0.7 * rng.normal(size=bank.routing.shape)).astype(
            bank.routing.data.dtype
        )
    return bank


class TestRoute:
    def test_zero_matrix_gives_half(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4, 4, 2)))
        alpha = route(x, Tensor(np.zeros((2, 5))), "sigmoid")
        assert alpha.shape == (3, 5)
        assert np.allclose(alpha.data, 0.5)

    def test_analytic_sigmoid(self):
        x = Tensor(np.ones((1, 3, 3, 1)))
        alpha = route(x, Tensor(np.array([[math.log(3.0)]])), "sigmoid")
        assert np.allclose(alpha.data, 0.75, atol=1e-6)

    def test_matches_stepwise_composition_exactly(self, f64):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 5, 5, 3)))
        r = Tensor(rng.normal(size=(3, 6)))
        got = route(x, r, "sigmoid").data
        want = ops.sigmoid(
            ops.fully_connected(ops.global_average_pool(x), r)
        ).data
        assert (got == want).all()

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            route(Tensor(np.ones((1, 2, 2, 3))), Tensor(np.zeros((4, 2))))

    def test_pooled_input_accepted(self):
        # the classifier routes from the already pooled vector
        alpha = route(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))
        assert alpha.shape == (2, 4)

    def test_validate_routing_weights(self):
        rng = np.random.default_rng(2)
        sig = route(Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(rng.normal(size=(2, 4))), "sigmoid")
        soft = route(Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(rng.normal(size=(2, 4))), "softmax")
        assert validate_routing_weights(sig.data, "sigmoid")
        assert validate_routing_weights(soft.data, "softmax")


class TestCombineKernels:
    def test_one_hot_selects_expert(self):
        rng = np.random.default_rng(3)
        bank = make_bank(rng, ConvKind.STANDARD, 4, (3, 3, 2, 2), 2)
        for i in range(4):
            alpha = np.zeros(4, dtype=bank.experts.data.dtype)
            alpha[i] = 1.0
            mixed = combine_kernels(Tensor(alpha), bank)
            assert np.array_equal(mixed.data, bank.experts.data[i])

    def test_cancellation(self):
        rng = np.random.default_rng(4)
        bank = make_bank(rng, ConvKind.STANDARD, 2, (3, 3, 1, 1), 1)
        bank.experts.data[1] = -bank.experts.data[0]
        mixed = combine_kernels(Tensor(np.array([0.5, 0.5], dtype=bank.experts.data.dtype)), bank)
        assert np.allclose(mixed.data, 0.0, atol=1e-7)

    def test_against_elementwise_accumulation(self, f64):
        rng = np.random.default_rng(5)
        bank = make_bank(rng, ConvKind.STANDARD, 5, (3, 3, 2, 4), 2)
        alpha = rng.uniform(size=5)
        mixed = combine_kernels(Tensor(alpha), bank).data
        want = np.zeros_like(mixed)
        for i in range(5):
            want += alpha[i] * bank.experts.data[i]
        assert max_rel_err(mixed, want) < 1e-6

    def test_output_shape_equals_expert_shape(self):
        rng = np.random.default_rng(6)
        bank = make_bank(rng, ConvKind.DEPTHWISE, 3, (3, 3, 4, 1), 4)
        mixed = combine_kernels(Tensor(np.ones(3, dtype=bank.experts.data.dtype) / 3), bank)
        assert mixed.shape == (3, 3, 4, 1)


class TestSelectStrategy:
    def test_auto_boundary(self):
        assert select_strategy(4, ExecutionStrategy.AUTO) is ExecutionStrategy.BRANCHED_MOE
        assert select_strategy(5, ExecutionStrategy.AUTO) is ExecutionStrategy.FUSED

    def test_explicit_passthrough(self):
        assert select_strategy(2, ExecutionStrategy.FUSED) is ExecutionStrategy.FUSED
        assert select_strategy(16, ExecutionStrategy.BRANCHED_MOE) is ExecutionStrategy.BRANCHED_MOE

    def test_small_and_large(self):
        assert select_strategy(1, ExecutionStrategy.AUTO) is ExecutionStrategy.BRANCHED_MOE
        assert select_strategy(16, ExecutionStrategy.AUTO) is ExecutionStrategy.FUSED


class TestForwardEquivalence:
    def test_single_expert_equals_scaled_static_conv(self, f64):
        rng = np.random.default_rng(7)
        bank = make_bank(rng, ConvKind.STANDARD, 1, (3, 3, 2, 3), 2)
        x = Tensor(rng.normal(size=(2, 6, 6, 2)))
        out = condconv_forward(x, bank, strategy=ExecutionStrategy.FUSED)
        alpha = route(x, bank.routing).data  # [B, 1]
        for b in range(2):
            static = ops.conv2d(
                Tensor(x.data[b : b + 1]),
                Tensor(alpha[b, 0] * bank.experts.data[0]),
                1, "same",
            )
            assert max_rel_err(out.data[b : b + 1], static.data) < 1e-9

    def test_fused_vs_branched_reference_case(self):
        # float32 build, the documented testing point: B=4, 8x8x4, n=8, 3x3
        rng = np.random.default_rng(8)
        bank = make_bank(rng, ConvKind.STANDARD, 8, (3, 3, 4, 4), 4)
        x = Tensor(rng.normal(size=(4, 8, 8, 4)).astype(np.float32))
        yf = condconv_forward(x, bank, strategy=ExecutionStrategy.FUSED)
        yb = condconv_forward(x, bank, strategy=ExecutionStrategy.BRANCHED_MOE)
        assert scale_rel_err(yf.data, yb.data) < 1e-5

    def test_constant_routing_collapses_to_static(self, f64):
        rng = np.random.default_rng(9)
        bank = make_bank(rng, ConvKind.STANDARD, 4, (3, 3, 3, 2), 3, random_routing=False)
        static_kernel = Tensor(0.5 * bank.experts.data.sum(axis=0))
        for trial in range(5):
            x = Tensor(rng.normal(size=(3, 5, 5, 3)))
            out = condconv_forward(x, bank, strategy=ExecutionStrategy.AUTO)
            want = ops.conv2d(x, static_kernel, 1, "same")
            assert max_rel_err(out.data, want.data, floor=1e-12) < 1e-9

    def test_constant_routing_is_batch_independent(self, f64):
        # same image in two different batches -> bitwise identical row (64-bit)
        rng = np.random.default_rng(10)
        bank = make_bank(rng, ConvKind.STANDARD, 4, (3, 3, 2, 2), 2, random_routing=False)
        image = rng.normal(size=(1, 6, 6, 2))
        batch_a = np.concatenate([image, rng.normal(size=(2, 6, 6, 2))], axis=0)
        batch_b = np.concatenate([rng.normal(size=(3, 6, 6, 2)), image], axis=0)
        out_a = condconv_forward(Tensor(batch_a), bank).data[0]
        out_b = condconv_forward(Tensor(batch_b), bank).data[3]
        assert np.array_equal(out_a, out_b)

    def test_routing_sensitivity(self):
        # nonzero routing: inputs with different pooled vectors get different kernels
        rng = np.random.default_rng(11)
        bank = make_bank(rng, ConvKind.STANDARD, 4, (3, 3, 2, 2), 2)
        x = Tensor(rng.normal(size=(2, 5, 5, 2)).astype(np.float32))
        alpha = route(x, bank.routing).data
        k0 = (alpha[0, :, None] * bank.experts.data.reshape(4, -1)).sum(axis=0)
        k1 = (alpha[1, :, None] * bank.experts.data.reshape(4, -1)).sum(axis=0)
        assert np.abs(k0 - k1).max() > 0.0

    def test_one_hot_alpha_equals_selected_expert_conv(self, f64):
        rng = np.random.default_rng(12)
        bank = make_bank(rng, ConvKind.STANDARD, 3, (3, 3, 2, 2), 2)
        x = Tensor(rng.normal(size=(3, 5, 5, 2)))
        alpha = np.zeros((3, 3))
        alpha[:, 1] = 1.0
        out = condconv_forward(x, bank, alpha=Tensor(alpha))
        want = ops.conv2d(x, Tensor(bank.experts.data[1]), 1, "same")
        assert max_rel_err(out.data, want.data) < 1e-6

    @pytest.mark.parametrize("kind,shape,xshape", [
        (ConvKind.STANDARD, (3, 3, 3, 4), (2, 6, 6, 3)),
        (ConvKind.DEPTHWISE, (3, 3, 3, 1), (2, 6, 6, 3)),
    ])
    @pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
    def test_equivalence_across_kinds_and_counts(self, f64, kind, shape, xshape, n):
        rng = np.random.default_rng(13 + n)
        bank = make_bank(rng, kind, n, shape, xshape[-1])
        x = Tensor(rng.normal(size=xshape))
        for stride in (1, 2):
            yf = condconv_forward(x, bank, strategy=ExecutionStrategy.FUSED, stride=stride)
            yb = condconv_forward(x, bank, strategy=ExecutionStrategy.BRANCHED_MOE, stride=stride)
            assert scale_rel_err(yf.data, yb.data) < 1e-12


class TestCondConvFc:
    def test_one_hot_alpha_equals_static_fc(self, f64):
        rng = np.random.default_rng(20)
        bank = make_bank(rng, ConvKind.FC_1X1, 3, (5, 4), 5)
        x = Tensor(rng.normal(size=(2, 5)))
        alpha = np.zeros((2, 3))
        alpha[:, 2] = 1.0
        out = condconv_fc(x, bank, alpha=Tensor(alpha))
        want = ops.matmul(x, Tensor(bank.experts.data[2]))
        assert max_rel_err(out.data, want.data) < 1e-9

    def test_constant_routing_equals_halved_sum(self, f64):
        rng = np.random.default_rng(21)
        bank = make_bank(rng, ConvKind.FC_1X1, 4, (5, 3), 5, random_routing=False)
        x = Tensor(rng.normal(size=(3, 5)))
        out = condconv_fc(x, bank)
        want = ops.matmul(x, Tensor(0.5 * bank.experts.data.sum(axis=0)))
        assert max_rel_err(out.data, want.data, floor=1e-12) < 1e-9

    def test_fused_vs_branched(self, f64):
        rng = np.random.default_rng(22)
        for n in (1, 2, 4, 8, 16):
            bank = make_bank(rng, ConvKind.FC_1X1, n, (6, 4), 6)
            x = Tensor(rng.normal(size=(4, 6)))
            yf = condconv_fc(x, bank, strategy=ExecutionStrategy.FUSED)
            yb = condconv_fc(x, bank, strategy=ExecutionStrategy.BRANCHED_MOE)
            assert scale_rel_err(yf.data, yb.data) < 1e-12

    def test_wrong_kind_rejected(self):
        rng = np.random.default_rng(23)
        bank = make_bank(rng, ConvKind.STANDARD, 2, (3, 3, 2, 2), 2)
        with pytest.raises(ConfigError):
            condconv_fc(Tensor(np.ones((1, 2))), bank)


class TestBankValidation:
    def test_routing_column_mismatch(self):
        rng = np.random.default_rng(24)
        experts = Tensor(rng.normal(size=(3, 3, 3, 2, 2)))
        with pytest.raises(ConfigError):
            ExpertBank(ConvKind.STANDARD, experts, Tensor(np.zeros((2, 4))))

    def test_depthwise_shape_enforced(self):
        rng = np.random.default_rng(25)
        experts = Tensor(rng.normal(size=(2, 3, 3, 2, 2)))  # last dim must be 1
        with pytest.raises(ConfigError):
            ExpertBank(ConvKind.DEPTHWISE, experts, Tensor(np.zeros((2, 2))))

    def test_zero_experts_rejected(self):
        rng = np.random.default_rng(26)
        with pytest.raises(ConfigError):
            ExpertBank.create(ConvKind.STANDARD, 0, (3, 3, 1, 1), 1, rng)

    def test_missing_routing_needs_external_alpha(self):
        rng = np.random.default_rng(27)
        bank = ExpertBank.create(ConvKind.STANDARD, 2, (3, 3, 1, 1), None, rng)
        with pytest.raises(ConfigError):
            condconv_forward(Tensor(np.ones((1, 4, 4, 1))), bank)
