"""Model builders and the materialized, runnable model.

``build_mobilenet_v1`` produces the MobileNetV1 family: a 3x3 stride-2 stem,
13 depthwise-separable blocks, global average pooling, and a classifier.
Blocks at or after ``condconv_begin_layer`` swap their depthwise and pointwise
kernels for expert banks sharing one router per block, routed from the block
input; the classifier can optionally be conditional too, routed from the
pooled feature vector. ``build_toy_cnn`` is the same recipe shrunk to a few
blocks for 16x16-ish inputs.

Built models are immutable for inference; only the optimizer mutates
parameters during training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import (
    ConvKind,
    ExecutionStrategy,
    ExpertBank,
    condconv_fc,
    condconv_forward,
    expert_dropout,
    fan_in_uniform,
)
from .modelspec import FC_UNIT, LayerDef, ModelSpec, validate
from .routers import Router, RouterBinding, RouterConfig, bind_shared_routers, make_router
from .tensor import Tensor, default_dtype

__all__ = [
    "Model",
    "build_model",
    "build_mobilenet_v1",
    "mobilenet_v1_spec",
    "build_toy_cnn",
    "toy_cnn_spec",
    "scale_channels",
    "MOBILENET_V1_BLOCKS",
]

# (base output channels, stride) of the 13 separable blocks at width 1.0.
MOBILENET_V1_BLOCKS = [
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
]

MOBILENET_V1_STEM = 32

# Begin-layer values above the block count mean "no convolutional layer is
# conditional" (the classifier can still be, giving the FC-only ablation).
MAX_BEGIN_LAYER = 15


def scale_channels(base: int, width_multiplier: float) -> int:
    """Width scaling with rounding to the nearest multiple of 8, minimum 8."""
    if width_multiplier <= 0:
        raise ConfigError(f"width multiplier must be positive, got {width_multiplier}")
    return max(8, int(round(base * width_multiplier / 8.0)) * 8)


# ---------------------------------------------------------------------------
# spec builders


def mobilenet_v1_spec(
    width_multiplier: float = 1.0,
    num_experts: int = 8,
    condconv_begin_layer: Optional[int] = 6,
    use_cc_classifier: bool = True,
    router: Optional[RouterConfig] = None,
    num_classes: int = 1000,
) -> ModelSpec:
    if condconv_begin_layer is not None and not (1 <= condconv_begin_layer <= MAX_BEGIN_LAYER):
        raise ConfigError(
            f"begin layer {condconv_begin_layer} outside 1..{MAX_BEGIN_LAYER}"
        )
    router = router or RouterConfig()
    begin = condconv_begin_layer
    layers: List[LayerDef] = []
    stem_out = scale_channels(MOBILENET_V1_STEM, width_multiplier)
    layers.append(LayerDef("stem", 3, 2, 3, stem_out, condconv=False, block=0))
    cin = stem_out
    for i, (base_out, stride) in enumerate(MOBILENET_V1_BLOCKS, start=1):
        cout = scale_channels(base_out, width_multiplier)
        cc = begin is not None and i >= begin
        layers.append(LayerDef("dw", 3, stride, cin, cin, condconv=cc, block=i))
        layers.append(LayerDef("pw", 1, 1, cin, cout, condconv=cc, block=i))
        cin = cout
    layers.append(LayerDef("gap", 0, 0, cin, cin))
    layers.append(LayerDef("fc", 1, 1, cin, num_classes, condconv=use_cc_classifier))
    spec = ModelSpec(
        layers=layers,
        width_multiplier=width_multiplier,
        num_experts=num_experts,
        condconv_begin_layer=begin,
        use_cc_classifier=use_cc_classifier,
        router=router,
        num_classes=num_classes,
        arch="mobilenet_v1",
    )
    _raise_on_violations(spec)
    return spec


def toy_cnn_spec(
    channels: int = 8,
    blocks: int = 2,
    num_experts: int = 4,
    condconv_begin_layer: Optional[int] = 1,
    use_cc_classifier: bool = True,
    router: Optional[RouterConfig] = None,
    num_classes: int = 4,
    in_channels: int = 1,
) -> ModelSpec:
    """A stem plus 2-4 separable blocks for 16x16-32x32 inputs."""
    if not (1 <= blocks <= 4):
        raise ConfigError(f"toy model supports 1..4 blocks, got {blocks}")
    if condconv_begin_layer is not None and not (1 <= condconv_begin_layer <= blocks + 2):
        raise ConfigError(f"begin layer {condconv_begin_layer} outside 1..{blocks + 2}")
    router = router or RouterConfig(anchor_layer=condconv_begin_layer or 1)
    begin = condconv_begin_layer
    layers = [LayerDef("stem", 3, 1, in_channels, channels, condconv=False, block=0)]
    cin = channels
    for i in range(1, blocks + 1):
        cout = min(4 * channels, cin * 2)
        cc = begin is not None and i >= begin
        layers.append(LayerDef("dw", 3, 2, cin, cin, condconv=cc, block=i))
        layers.append(LayerDef("pw", 1, 1, cin, cout, condconv=cc, block=i))
        cin = cout
    layers.append(LayerDef("gap", 0, 0, cin, cin))
    layers.append(LayerDef("fc", 1, 1, cin, num_classes, condconv=use_cc_classifier))
    spec = ModelSpec(
        layers=layers,
        width_multiplier=1.0,
        num_experts=num_experts,
        condconv_begin_layer=begin,
        use_cc_classifier=use_cc_classifier,
        router=router,
        num_classes=num_classes,
        arch="toy_cnn",
    )
    _raise_on_violations(spec)
    return spec


def _raise_on_violations(spec: ModelSpec) -> None:
    violations = validate(spec)
    if violations:
        raise ConfigError("invalid model spec: " + "; ".join(violations))


# ---------------------------------------------------------------------------
# materialized units


@dataclass
class ConvUnit:
    """Stem / depthwise / pointwise layer with per-channel affine and ReLU."""

    name: str
    layer: LayerDef
    kernel: Optional[Tensor]          # static kernel, or None when conditional
    bank: Optional[ExpertBank]        # expert bank, or None when static
    gamma: Tensor
    beta: Tensor

    def named_parameters(self):
        if self.bank is not None:
            yield f"{self.name}/experts", self.bank.experts
        else:
            yield f"{self.name}/kernel", self.kernel
        yield f"{self.name}/gamma", self.gamma
        yield f"{self.name}/beta", self.beta

    def forward(self, x, alpha, strategy):
        if self.bank is not None:
            out = condconv_forward(
                x, self.bank, strategy=strategy, stride=self.layer.stride,
                padding="same", alpha=alpha,
            )
        elif self.layer.kind == "dw":
            out = ops.depthwise_conv2d(x, self.kernel, self.layer.stride, "same")
        else:
            out = ops.conv2d(x, self.kernel, self.layer.stride, "same")
        return ops.relu(ops.channel_scale_shift(out, self.gamma, self.beta))


@dataclass
class FcUnit:
    """Classifier head on the pooled vector; conditional when bank is set."""

    name: str
    layer: LayerDef
    weights: Optional[Tensor]
    bank: Optional[ExpertBank]
    bias: Tensor

    def named_parameters(self):
        if self.bank is not None:
            yield f"{self.name}/experts", self.bank.experts
        else:
            yield f"{self.name}/weights", self.weights
        yield f"{self.name}/bias", self.bias

    def forward(self, x, alpha, strategy):
        if self.bank is not None:
            out = condconv_fc(x, self.bank, strategy=strategy, alpha=alpha)
        else:
            out = ops.matmul(x, self.weights)
        return ops.add_bias(out, self.bias)


class Model:
    """A built network: spec, parameter banks, and the router assignment."""

    def __init__(self, spec: ModelSpec, units: dict, routers: Dict, binding: RouterBinding):
        self.spec = spec
        self.units = units              # layer index -> ConvUnit/FcUnit/None(gap)
        self.routers = routers          # router id -> Router
        self.binding = binding

    # ------------------------------------------------------------------
    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out: List[Tuple[str, Tensor]] = []
        for i, layer in enumerate(self.spec.layers):
            unit = self.units[i]
            if unit is not None:
                out.extend(unit.named_parameters())
        for rid in self.binding.eval_site:
            for j, p in enumerate(self.routers[rid].parameters()):
                out.append((f"router/{rid}/{j}", p))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def freeze_routing(self) -> None:
        for router in self.routers.values():
            for p in router.parameters():
                p.requires_grad = False

    def reset_router_counters(self) -> None:
        for router in self.routers.values():
            router.evaluations = 0

    # ------------------------------------------------------------------
    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        dropout_keep: float = 1.0,
        expert_dropout_rate: float = 0.0,
        strategy: ExecutionStrategy = ExecutionStrategy.AUTO,
        record: Optional[dict] = None,
    ) -> Tensor:
        """Logits for a batch. ``record``, when given, is filled with the
        alpha consumed at every conditional layer: ``{layer_index: (unit, array)}``.
        """
        if training and (dropout_keep < 1.0 or expert_dropout_rate > 0.0) and rng is None:
            raise ConfigError("training-time dropout needs an rng")
        alpha_cache: dict = {}
        last_alpha: Optional[Tensor] = None

        for i, layer in enumerate(self.spec.layers):
            unit = self.units[i]
            if layer.kind == "gap":
                x = ops.global_average_pool(x)
                if training and dropout_keep < 1.0:
                    mask = (rng.random(x.shape) < dropout_keep).astype(x.data.dtype)
                    x = ops.mul(x, Tensor(mask / dropout_keep, dtype=x.data.dtype))
                continue

            alpha = None
            if layer.condconv:
                rid = self.binding.assignment[layer.unit]
                if rid not in alpha_cache:
                    if self.binding.eval_site[rid] != layer.unit:
                        raise ConfigError(
                            f"router {rid!r} consumed before its evaluation site"
                        )
                    router = self.routers[rid]
                    alpha = router(x, alpha_prev=last_alpha)
                    if training and expert_dropout_rate > 0.0:
                        alpha = expert_dropout(alpha, expert_dropout_rate, rng)
                    alpha_cache[rid] = alpha
                    last_alpha = alpha
                alpha = alpha_cache[rid]
                if record is not None:
                    record[i] = (layer.unit, alpha.data.copy())
            x = unit.forward(x, alpha, strategy)
        return x

    # ------------------------------------------------------------------
    def to_static_twin(self) -> "Model":
        """The static model this one collapses to under constant routing.

        With zero routing matrices every alpha entry is sigmoid(0) = 0.5 (or
        1/n under softmax), so each conditional kernel freezes at that
        constant mixture of its experts.
        """
        const = 0.5 if self.spec.router.activation == "sigmoid" else 1.0 / self.spec.num_experts
        static_spec = replace(
            self.spec,
            layers=[replace(l, condconv=False) for l in self.spec.layers],
            condconv_begin_layer=None,
            use_cc_classifier=False,
            num_experts=1,
        )
        twin = build_model(static_spec, seed=0)
        for i, layer in enumerate(self.spec.layers):
            unit, twin_unit = self.units[i], twin.units[i]
            if unit is None:
                continue
            if isinstance(unit, ConvUnit):
                kernel = (
                    const * unit.bank.experts.data.sum(axis=0)
                    if unit.bank is not None
                    else unit.kernel.data.copy()
                )
                twin_unit.kernel.data = kernel
                twin_unit.gamma.data = unit.gamma.data.copy()
                twin_unit.beta.data = unit.beta.data.copy()
            else:
                weights = (
                    const * unit.bank.experts.data.sum(axis=0)
                    if unit.bank is not None
                    else unit.weights.data.copy()
                )
                twin_unit.weights.data = weights
                twin_unit.bias.data = unit.bias.data.copy()
        return twin


# ---------------------------------------------------------------------------


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Materialize parameters for a spec. Deterministic in the seed."""
    _raise_on_violations(spec)
    rng = np.random.default_rng(seed)
    n = spec.num_experts
    units: dict = {}

    cc_units = spec.condconv_units()
    binding = bind_shared_routers(cc_units, spec.router)

    # Routers are created at their evaluation sites, in network order, so
    # hierarchical routers know the preceding layer exists.
    routers: Dict = {}
    seen_cc_units: list = []
    for i, layer in enumerate(spec.layers):
        if layer.condconv and layer.unit not in seen_cc_units:
            seen_cc_units.append(layer.unit)
            rid = binding.assignment[layer.unit]
            if binding.eval_site[rid] == layer.unit and rid not in routers:
                first = layer.unit == cc_units[0]
                if spec.router.variant == "hierarchical" and first:
                    cfg = RouterConfig(variant="per_block")
                    routers[rid] = make_router(cfg, layer.cin, n, rng=rng)
                else:
                    routers[rid] = make_router(
                        spec.router, layer.cin, n,
                        prev_n=(None if first else n), rng=rng,
                    )

    alpha_init = 0.5 if spec.router.activation == "sigmoid" else 1.0 / n

    for i, layer in enumerate(spec.layers):
        if layer.kind == "gap":
            units[i] = None
            continue
        if layer.kind == "fc":
            if layer.condconv:
                bank = ExpertBank.create(
                    ConvKind.FC_1X1, n, (layer.cin, layer.cout), None, rng,
                    alpha_init=alpha_init,
                )
                weights = None
            else:
                bank = None
                weights = Tensor(
                    fan_in_uniform((layer.cin, layer.cout), layer.cin, rng),
                    requires_grad=True,
                )
            bias = Tensor(np.zeros(layer.cout, dtype=default_dtype()), requires_grad=True)
            units[i] = FcUnit("fc", layer, weights, bank, bias)
            continue

        name = "stem" if layer.kind == "stem" else f"block{layer.block}/{layer.kind}"
        if layer.kind == "dw":
            kind, shape, fan_in = ConvKind.DEPTHWISE, (layer.k, layer.k, layer.cin, 1), layer.k * layer.k
        else:
            kind, shape, fan_in = (
                ConvKind.STANDARD,
                (layer.k, layer.k, layer.cin, layer.cout),
                layer.k * layer.k * layer.cin,
            )
        if layer.condconv:
            bank = ExpertBank.create(kind, n, shape, None, rng, alpha_init=alpha_init)
            kernel = None
        else:
            bank = None
            kernel = Tensor(fan_in_uniform(shape, fan_in, rng), requires_grad=True)
        gamma = Tensor(np.ones(layer.cout, dtype=default_dtype()), requires_grad=True)
        beta = Tensor(np.zeros(layer.cout, dtype=default_dtype()), requires_grad=True)
        units[i] = ConvUnit(name, layer, kernel, bank, gamma, beta)

    return Model(spec, units, routers, binding)


def build_mobilenet_v1(
    width_multiplier: float = 1.0,
    num_experts: int = 8,
    condconv_begin_layer: Optional[int] = 6,
    use_cc_classifier: bool = True,
    router: Optional[RouterConfig] = None,
    num_classes: int = 1000,
    seed: int = 0,
) -> Model:
    spec = mobilenet_v1_spec(
        width_multiplier, num_experts, condconv_begin_layer,
        use_cc_classifier, router, num_classes,
    )
    return build_model(spec, seed)


def build_toy_cnn(
    channels: int = 8,
    blocks: int = 2,
    num_experts: int = 4,
    condconv_begin_layer: Optional[int] = 1,
    use_cc_classifier: bool = True,
    router: Optional[RouterConfig] = None,
    num_classes: int = 4,
    in_channels: int = 1,
    seed: int = 0,
) -> Model:
    spec = toy_cnn_spec(
        channels, blocks, num_experts, condconv_begin_layer,
        use_cc_classifier, router, num_classes, in_channels,
    )
    return build_model(spec, seed)
