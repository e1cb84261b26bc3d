"""Exact multiply-add and parameter accounting.

Conventions: one multiply-add counts 1; pure additions (global average
pooling, residual adds), biases, per-channel affines, and activations count 0.
A conditional layer costs its single convolution plus ``n * params_per_expert``
to mix the kernel plus the routing projection — so each additional expert
parameter costs exactly one extra multiply-add, independent of the feature-map
size.

Parameter counts include everything learnable (expert kernels, routing
matrices, channel affines, classifier bias) so they match a materialized
model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import ConfigError
from .modelspec import FC_UNIT, LayerDef, ModelSpec
from .ops import conv_output_size
from .routers import RouterConfig, bind_shared_routers

__all__ = ["LayerCost", "conv_madds", "condconv_madds", "router_cost", "model_madds"]


@dataclass
class LayerCost:
    """Multiply-adds and parameters for one layer (or a whole model)."""

    madds: int = 0
    params: int = 0
    breakdown: dict = field(default_factory=lambda: {"conv": 0, "routing": 0, "combine": 0, "other": 0})

    def __post_init__(self):
        assert self.madds == sum(self.breakdown.values()), "breakdown must sum to madds"

    def __add__(self, other: "LayerCost") -> "LayerCost":
        merged = {k: self.breakdown[k] + other.breakdown[k] for k in self.breakdown}
        return LayerCost(self.madds + other.madds, self.params + other.params, merged)


def _conv_counts(kind: str, k: int, cin: int, cout: int, h_out: int, w_out: int) -> Tuple[int, int]:
    """(madds, kernel params) of the bare linear operation."""
    if kind == "standard":
        per_pos = k * k * cin * cout
        return h_out * w_out * per_pos, per_pos
    if kind == "depthwise":
        per_pos = k * k * cin
        return h_out * w_out * per_pos, per_pos
    if kind == "fc":
        return cin * cout, cin * cout
    raise ConfigError(f"unknown conv kind {kind!r}")


def conv_madds(kind: str, k: int, cin: int, cout: int, h_out: int, w_out: int) -> LayerCost:
    """Cost of a static convolution / dense layer at the given output size."""
    madds, params = _conv_counts(kind, k, cin, cout, h_out, w_out)
    return LayerCost(madds, params, {"conv": madds, "routing": 0, "combine": 0, "other": 0})


def condconv_madds(
    kind: str,
    k: int,
    cin: int,
    cout: int,
    h_out: int,
    w_out: int,
    n: int,
    routed_channels: int,
) -> LayerCost:
    """Cost of a conditional layer with ``n`` experts and baseline routing.

    The convolution itself is unchanged; mixing adds ``n * params_per_expert``
    and routing adds ``routed_channels * n`` (pooling is additions only).
    """
    if n < 1:
        raise ConfigError(f"expert count must be >= 1, got {n}")
    conv, params_per_expert = _conv_counts(kind, k, cin, cout, h_out, w_out)
    combine = n * params_per_expert
    routing = routed_channels * n
    return LayerCost(
        conv + combine + routing,
        n * params_per_expert + routed_channels * n,
        {"conv": conv, "routing": routing, "combine": combine, "other": 0},
    )


def router_cost(config: RouterConfig, input_dim: int, n: int, first_unit: bool) -> Tuple[int, int]:
    """(madds, params) of one router evaluation under the given variant.

    The first conditional unit of a hierarchical model uses a plain linear
    router; later units consume ``input_dim + n`` features.
    """
    if config.variant == "hidden":
        h = config.hidden_width(input_dim)
        count = input_dim * h + h * n
        return count, count
    if config.variant == "hierarchical" and not first_unit:
        count = (input_dim + n) * n
        return count, count
    count = input_dim * n
    return count, count


@dataclass
class LayerCostRow:
    """Per-layer line of the model cost table."""

    name: str
    kind: str
    out_h: int
    out_w: int
    cost: LayerCost


def model_madds(spec: ModelSpec, input_resolution: int, input_channels: int = 3) -> Tuple[LayerCost, List[LayerCostRow]]:
    """Total cost and per-layer table for a whole model.

    Shared routers are counted once, at their evaluation site. Channel
    affines (2 per conv output channel) and the classifier bias enter the
    parameter count with zero multiply-adds.
    """
    units = spec.condconv_units()
    binding = bind_shared_routers(units, spec.router)
    h = w = int(input_resolution)
    channels = input_channels
    rows: List[LayerCostRow] = []
    total = LayerCost()
    counted_routers: set = set()
    seen_units: set = set()

    for i, layer in enumerate(spec.layers):
        if layer.cin != channels and layer.kind != "gap":
            raise ConfigError(
                f"layer {i} ({layer.kind}): expected {channels} input channels, "
                f"spec says {layer.cin}"
            )
        if layer.kind in ("stem", "dw", "pw"):
            h = conv_output_size(h, layer.k, layer.stride, "same")
            w = conv_output_size(w, layer.k, layer.stride, "same")
            kind = "depthwise" if layer.kind == "dw" else "standard"
            if layer.condconv:
                cost = condconv_madds(
                    kind, layer.k, layer.cin, layer.cout, h, w, spec.num_experts, 0
                )
            else:
                cost = conv_madds(kind, layer.k, layer.cin, layer.cout, h, w)
            cost.params += 2 * layer.cout  # learned per-channel scale and shift
            name = "stem" if layer.kind == "stem" else f"block{layer.block}/{layer.kind}"
        elif layer.kind == "gap":
            cost = LayerCost()
            name = "gap"
        elif layer.kind == "fc":
            if layer.condconv:
                cost = condconv_madds(
                    "fc", 1, layer.cin, layer.cout, 1, 1, spec.num_experts, 0
                )
            else:
                cost = conv_madds("fc", 1, layer.cin, layer.cout, 1, 1)
            cost.params += layer.cout  # bias
            name = "fc"
        else:  # pragma: no cover
            raise ConfigError(f"unknown layer kind {layer.kind!r}")

        # Routers run once per forward, at their evaluation site: the input of
        # the first layer of the unit they are bound to.
        unit = layer.unit
        if layer.condconv and unit not in seen_units:
            seen_units.add(unit)
            rid = binding.assignment[unit]
            if binding.eval_site[rid] == unit and rid not in counted_routers:
                counted_routers.add(rid)
                r_madds, r_params = router_cost(
                    spec.router, layer.cin, spec.num_experts, unit == units[0]
                )
                cost = cost + LayerCost(
                    r_madds, r_params,
                    {"conv": 0, "routing": r_madds, "combine": 0, "other": 0},
                )
        rows.append(LayerCostRow(name, layer.kind, h, w, cost))
        total = total + cost
        channels = layer.cout

    return total, rows
