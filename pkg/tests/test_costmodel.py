"""Multiply-add accounting: formulas, the one-madd-per-parameter identity,
and the reproduction of published whole-model counts."""

import numpy as np
import pytest

from condconv import ConfigError
from condconv.costmodel import LayerCost, condconv_madds, conv_madds, model_madds, router_cost
from condconv.routers import RouterConfig
from condconv.zoo import build_toy_cnn, mobilenet_v1_spec, toy_cnn_spec


def counted_conv_macs(x, kernel, stride=1):
    """Execute a naive valid-padding convolution, counting each
    multiply-accumulate as it happens."""
    b, h, w, cin = x.shape
    k, _, _, cout = kernel.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((b, ho, wo, cout))
    macs = 0
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    for u in range(k):
                        for v in range(k):
                            for ci in range(cin):
                                out[bi, i, j, co] += (
                                    x[bi, i * stride + u, j * stride + v, ci]
                                    * kernel[u, v, ci, co]
                                )
                                macs += 1
    return out, macs


def counted_fc_macs(x, w):
    out = np.zeros((x.shape[0], w.shape[1]))
    macs = 0
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            for t in range(x.shape[1]):
                out[i, j] += x[i, t] * w[t, j]
                macs += 1
    return out, macs


class TestConvMadds:
    def test_standard_by_hand(self):
        cost = conv_madds("standard", 3, 16, 32, 14, 14)
        assert cost.madds == 903_168  # 196 * 9 * 16 * 32
        assert cost.breakdown["conv"] == cost.madds
        assert cost.params == 9 * 16 * 32

    def test_fc_product(self):
        cost = conv_madds("fc", 1, 1024, 1000, 1, 1)
        assert cost.madds == 1_024_000

    def test_depthwise_by_hand(self):
        cost = conv_madds("depthwise", 3, 8, 8, 4, 4)
        assert cost.madds == 1_152  # 16 * 9 * 8

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            conv_madds("grouped", 3, 8, 8, 4, 4)

    def test_matches_instrumented_conv_execution(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6, 6, 3))
        kernel = rng.normal(size=(3, 3, 3, 4))
        _, macs = counted_conv_macs(x, kernel)
        assert conv_madds("standard", 3, 3, 4, 4, 4).madds == macs

    def test_matches_instrumented_fc_execution(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 7))
        w = rng.normal(size=(7, 5))
        _, macs = counted_fc_macs(x, w)
        assert conv_madds("fc", 1, 7, 5, 1, 1).madds == macs


class TestCondconvMadds:
    def test_example_from_formula(self):
        cost = condconv_madds("standard", 3, 16, 32, 14, 14, n=8, routed_channels=16)
        assert cost.breakdown["conv"] == 903_168
        assert cost.breakdown["combine"] == 8 * 4_608
        assert cost.breakdown["routing"] == 128
        assert cost.madds == 940_160

    def test_single_expert_degenerate(self):
        cost = condconv_madds("standard", 3, 4, 4, 5, 5, n=1, routed_channels=4)
        assert cost.breakdown["combine"] == 9 * 4 * 4
        assert cost.breakdown["routing"] == 4

    def test_marginal_cost_is_one_madd_per_parameter(self):
        for kind, k, cin, cout in [("standard", 3, 16, 32), ("depthwise", 3, 8, 8), ("fc", 1, 64, 10)]:
            params_per_expert = conv_madds(kind, k, cin, cout, 1, 1).params
            for n in range(2, 12):
                delta = (
                    condconv_madds(kind, k, cin, cout, 14, 14, n, cin).madds
                    - condconv_madds(kind, k, cin, cout, 14, 14, n - 1, cin).madds
                )
                assert delta == params_per_expert + cin

    def test_marginal_cost_independent_of_resolution(self):
        d1 = (
            condconv_madds("standard", 3, 8, 8, 28, 28, 5, 8).madds
            - condconv_madds("standard", 3, 8, 8, 28, 28, 4, 8).madds
        )
        d2 = (
            condconv_madds("standard", 3, 8, 8, 7, 7, 5, 8).madds
            - condconv_madds("standard", 3, 8, 8, 7, 7, 4, 8).madds
        )
        assert d1 == d2

    def test_conv_term_independent_of_n(self):
        costs = [
            condconv_madds("standard", 3, 8, 16, 10, 10, n, 8).breakdown["conv"]
            for n in (1, 2, 8, 32)
        ]
        assert len(set(costs)) == 1

    def test_invalid_expert_count(self):
        with pytest.raises(ConfigError):
            condconv_madds("standard", 3, 8, 8, 4, 4, 0, 8)

    def test_breakdown_sums(self):
        cost = condconv_madds("depthwise", 3, 32, 32, 9, 9, 4, 32)
        assert cost.madds == sum(cost.breakdown.values())


class TestRouterCost:
    def test_baseline(self):
        assert router_cost(RouterConfig("per_block"), 64, 8, first_unit=False) == (512, 512)

    def test_hidden(self):
        madds, params = router_cost(
            RouterConfig("hidden", hidden_size="large"), 64, 8, first_unit=False
        )
        assert madds == 64 * 512 + 512 * 8

    def test_hierarchical(self):
        madds, _ = router_cost(RouterConfig("hierarchical"), 64, 8, first_unit=False)
        assert madds == (64 + 8) * 8
        first, _ = router_cost(RouterConfig("hierarchical"), 64, 8, first_unit=True)
        assert first == 64 * 8


class TestModelMadds:
    def within(self, spec, resolution, target_millions, tolerance):
        total, _ = model_madds(spec, resolution)
        got = total.madds / 1e6
        assert abs(got - target_millions) / target_millions < tolerance, (
            f"{got:.1f}M vs {target_millions}M"
        )
        return total

    def test_full_width_static(self):
        self.within(mobilenet_v1_spec(1.0, 1, None, False), 224, 567, 0.02)

    def test_full_width_conditional_eight_experts(self):
        self.within(mobilenet_v1_spec(1.0, 8, 6, True), 224, 600, 0.02)

    def test_quarter_width_static(self):
        self.within(mobilenet_v1_spec(0.25, 1, None, False), 224, 41.2, 0.03)

    @pytest.mark.parametrize("begin,cc_fc,target", [
        (7, True, 55.7),
        (1, True, 56.3),
        (5, True, 56.0),
        (13, True, 52.5),
        (15, True, 49.3),   # classifier only
        (7, False, 47.6),   # no conditional classifier
    ])
    def test_quarter_width_begin_layer_ablation(self, begin, cc_fc, target):
        self.within(mobilenet_v1_spec(0.25, 32, begin, cc_fc), 224, target, 0.03)

    def test_monotone_in_width(self):
        totals = [
            model_madds(mobilenet_v1_spec(w, 1, None, False), 224)[0].madds
            for w in (0.25, 0.5, 0.75, 1.0)
        ]
        assert totals == sorted(totals)
        assert len(set(totals)) == 4

    def test_monotone_in_experts(self):
        totals = [
            model_madds(mobilenet_v1_spec(0.5, n, 7, True), 224)[0].madds
            for n in (1, 2, 4, 8, 16)
        ]
        assert totals == sorted(totals)
        assert len(set(totals)) == 5

    def test_per_layer_table_sums_to_total(self):
        total, rows = model_madds(mobilenet_v1_spec(0.5, 8, 6, True), 224)
        assert total.madds == sum(r.cost.madds for r in rows)
        assert total.params == sum(r.cost.params for r in rows)

    def test_shared_router_costs_less_than_per_block(self):
        per_block = model_madds(
            mobilenet_v1_spec(0.25, 32, 7, True, RouterConfig("per_block")), 224
        )[0].madds
        single = model_madds(
            mobilenet_v1_spec(0.25, 32, 7, True, RouterConfig("single", anchor_layer=7)), 224
        )[0].madds
        assert single < per_block

    def test_toy_params_match_built_model(self):
        for n in (1, 2, 4):
            model = build_toy_cnn(channels=8, blocks=2, num_experts=n, seed=1)
            total, _ = model_madds(model.spec, 16, input_channels=1)
            assert total.params == model.param_count()

    def test_mobilenet_params_match_built_model(self):
        model_spec = mobilenet_v1_spec(0.25, 4, 12, True, num_classes=10)
        from condconv.zoo import build_model

        model = build_model(model_spec, seed=0)
        total, _ = model_madds(model_spec, 224)
        assert total.params == model.param_count()

    def test_channel_mismatch_names_layer(self):
        spec = toy_cnn_spec(channels=8, blocks=2, num_experts=1)
        object.__setattr__(spec.layers[1], "cin", 99)
        with pytest.raises(ConfigError) as excinfo:
            model_madds(spec, 16, input_channels=1)
        assert "layer 1" in str(excinfo.value)
