"""Conditionally parameterized convolution: routing, expert mixing, and the
two mathematically equivalent execution strategies.

A layer owns ``n`` expert kernels plus a routing matrix ``R``. Per example,
routing produces scalar weights ``alpha`` in (0, 1); the effective kernel is
``sum_i alpha[i] * W_i``. The fused strategy materializes that kernel and runs
one convolution per example; the branched mixture-of-experts strategy runs
every expert on the whole batch and takes the alpha-weighted sum of outputs.
Both produce the same pre-activation output; the layer nonlinearity is applied
by the caller, outside the identity being exploited.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import ShapeError, Tensor, default_dtype

__all__ = [
    "ConvKind",
    "ExecutionStrategy",
    "ExpertBank",
    "route",
    "combine_kernels",
    "condconv_forward",
    "condconv_fc",
    "select_strategy",
    "fan_in_uniform",
    "validate_routing_weights",
    "expert_dropout",
]

# Above this many experts, running one convolution on a combined kernel beats
# summing per-expert branch outputs.
BRANCHED_MAX_EXPERTS = 4


class ConvKind(str, enum.Enum):
    STANDARD = "standard"
    DEPTHWISE = "depthwise"
    FC_1X1 = "fc_1x1"


class ExecutionStrategy(str, enum.Enum):
    FUSED = "fused"
    BRANCHED_MOE = "branched_moe"
    AUTO = "auto"


def select_strategy(n: int, requested: ExecutionStrategy) -> ExecutionStrategy:
    """Resolve ``AUTO`` by expert count; explicit requests pass through."""
    requested = ExecutionStrategy(requested)
    if requested is not ExecutionStrategy.AUTO:
        return requested
    return (
        ExecutionStrategy.BRANCHED_MOE
        if n <= BRANCHED_MAX_EXPERTS
        else ExecutionStrategy.FUSED
    )


def fan_in_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


@dataclass
class ExpertBank:
    """The expert kernels and routing matrix of one conditional layer.

    ``experts`` is one stacked parameter of shape [n, *kernel_shape]; expert
    ``i`` is the slice ``experts[i]`` and every expert has the shape of the
    static kernel it replaces. ``routing`` maps the routed input's pooled
    channels to ``n`` expert weights (no bias term).
    """

    kind: ConvKind
    experts: Tensor
    routing: Tensor | None = None

    def __post_init__(self):
        self.kind = ConvKind(self.kind)
        if self.experts.ndim < 2:
            raise ConfigError(f"experts must be stacked [n, ...], got {self.experts.shape}")
        if self.routing is not None:
            if self.routing.ndim != 2:
                raise ConfigError(f"routing matrix must be 2-D, got {self.routing.shape}")
            if self.routing.shape[1] != self.n:
                raise ConfigError(
                    f"routing matrix has {self.routing.shape[1]} columns for {self.n} experts"
                )
        if self.kind is ConvKind.STANDARD and self.experts.ndim != 5:
            raise ConfigError(f"standard experts must be [n,k,k,Cin,Cout], got {self.experts.shape}")
        if self.kind is ConvKind.DEPTHWISE and (
            self.experts.ndim != 5 or self.experts.shape[4] != 1
        ):
            raise ConfigError(f"depthwise experts must be [n,k,k,C,1], got {self.experts.shape}")
        if self.kind is ConvKind.FC_1X1 and self.experts.ndim != 3:
            raise ConfigError(f"fc experts must be [n,Din,Dout], got {self.experts.shape}")

    @property
    def n(self) -> int:
        return self.experts.shape[0]

    @property
    def expert_shape(self) -> tuple:
        return self.experts.shape[1:]

    @property
    def params_per_expert(self) -> int:
        return int(np.prod(self.expert_shape))

    @property
    def routed_channels(self) -> int:
        if self.routing is None:
            raise ConfigError("bank has no routing matrix (externally routed)")
        return self.routing.shape[0]

    @classmethod
    def create(
        cls,
        kind: ConvKind,
        n: int,
        expert_shape,
        routed_channels: int | None,
        rng: np.random.Generator,
        alpha_init: float = 0.5,
    ) -> "ExpertBank":
        """Fan-in-scaled expert init; routing starts at zero so the layer is
        born at the static-convolution-equivalent point.

        At that point the effective kernel is ``alpha_init * sum(W_i)``
        (zero routing gives sigmoid weights of 0.5, or 1/n under softmax), so
        each expert is scaled by ``1 / (alpha_init * sqrt(n))`` to give the
        mixture the variance of a single fan-in-initialized static kernel.
        Without this, small expert counts shrink activations layer by layer.

        ``routed_channels=None`` builds a bank without its own routing matrix,
        for layers whose alpha comes from a (possibly shared) block router.
        """
        kind = ConvKind(kind)
        if n < 1:
            raise ConfigError(f"expert count must be >= 1, got {n}")
        expert_shape = tuple(int(s) for s in expert_shape)
        if kind is ConvKind.STANDARD:
            k, _, cin, _ = expert_shape
            fan_in = k * k * cin
        elif kind is ConvKind.DEPTHWISE:
            k = expert_shape[0]
            fan_in = k * k
        else:
            fan_in = expert_shape[0]
        mix_scale = 1.0 / (alpha_init * math.sqrt(n))
        experts = Tensor(
            mix_scale * fan_in_uniform((n,) + expert_shape, fan_in, rng),
            requires_grad=True,
        )
        routing = None
        if routed_channels is not None:
            routing = Tensor(
                np.zeros((routed_channels, n), dtype=default_dtype()), requires_grad=True
            )
        return cls(kind=kind, experts=experts, routing=routing)


def route(x: Tensor, routing: Tensor, activation: str = "sigmoid") -> Tensor:
    """Per-example expert weights: pool, project with ``routing``, squash.

    ``x`` may be the NHWC layer input (pooled here) or an already pooled
    [B, C] vector. Returns alpha of shape [B, n].
    """
    if x.ndim == 4:
        pooled = ops.global_average_pool(x)
    elif x.ndim == 2:
        pooled = x
    else:
        raise ShapeError(f"route: expected [B,H,W,C] or [B,C] input, got {x.shape}")
    if pooled.shape[1] != routing.shape[0]:
        raise ShapeError(
            f"route: input channels {pooled.shape[1]} do not match routing matrix "
            f"{routing.shape}"
        )
    logits = ops.matmul(pooled, routing)
    if activation == "sigmoid":
        return ops.sigmoid(logits)
    if activation == "softmax":
        return ops.softmax(logits, axis=-1)
    raise ConfigError(f"unknown routing activation {activation!r}")


def validate_routing_weights(alpha: np.ndarray, activation: str, atol: float = 1e-6) -> bool:
    """True when alpha satisfies its activation's range contract."""
    if activation == "sigmoid":
        return bool(np.all(alpha > 0.0) and np.all(alpha < 1.0))
    if activation == "softmax":
        return bool(np.allclose(alpha.sum(axis=-1), 1.0, atol=atol))
    raise ConfigError(f"unknown routing activation {activation!r}")


def expert_dropout(
    alpha: Tensor,
    rate: float,
    rng: np.random.Generator,
    training: bool = True,
) -> Tensor:
    """Randomly zero routing weights during training; identity at inference.

    Each entry is dropped independently with probability ``rate``. Survivors
    are not rescaled: sigmoid routing weights are independent gates, not a
    normalized distribution.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"expert dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return alpha
    keep = (rng.random(alpha.shape) >= rate).astype(alpha.data.dtype)
    return ops.mul(alpha, Tensor(keep, dtype=alpha.data.dtype))


def combine_kernels(alpha_row: Tensor, bank: ExpertBank) -> Tensor:
    """Mix the experts with one example's weights: ``sum_i alpha[i] * W_i``."""
    if alpha_row.ndim != 1 or alpha_row.shape[0] != bank.n:
        raise ShapeError(
            f"combine_kernels: alpha {alpha_row.shape} vs {bank.n} experts"
        )
    flat = ops.reshape(bank.experts, (bank.n, bank.params_per_expert))
    mixed = ops.matmul(ops.reshape(alpha_row, (1, bank.n)), flat)
    return ops.reshape(mixed, bank.expert_shape)


def _per_example_kernels(alpha: Tensor, bank: ExpertBank) -> Tensor:
    b = alpha.shape[0]
    flat = ops.reshape(bank.experts, (bank.n, bank.params_per_expert))
    mixed = ops.matmul(alpha, flat)
    return ops.reshape(mixed, (b,) + bank.expert_shape)


def _resolve_alpha(x, bank, activation, alpha):
    if alpha is None:
        if bank.routing is None:
            raise ConfigError(
                "bank has no routing matrix; pass alpha from an external router"
            )
        alpha = route(x, bank.routing, activation)
    if alpha.ndim != 2 or alpha.shape[1] != bank.n:
        raise ShapeError(f"alpha {alpha.shape} does not match {bank.n} experts")
    if alpha.shape[0] != x.shape[0]:
        raise ShapeError(
            f"alpha batch {alpha.shape[0]} does not match input batch {x.shape[0]}"
        )
    return alpha


def condconv_forward(
    x: Tensor,
    bank: ExpertBank,
    activation: str = "sigmoid",
    strategy: ExecutionStrategy = ExecutionStrategy.AUTO,
    stride: int = 1,
    padding: str = "same",
    alpha: Tensor | None = None,
) -> Tensor:
    """Pre-activation output of a conditional convolution layer.

    ``alpha`` may be passed in by a block that shares routing weights across
    its layers (or that applied expert dropout); otherwise it is computed here
    from ``bank.routing``.
    """
    if bank.kind is ConvKind.FC_1X1:
        return condconv_fc(x, bank, activation=activation, strategy=strategy, alpha=alpha)
    if x.ndim != 4:
        raise ShapeError(f"condconv_forward: expected NHWC input, got {x.shape}")
    strategy = select_strategy(bank.n, strategy)
    alpha = _resolve_alpha(x, bank, activation, alpha)

    if strategy is ExecutionStrategy.FUSED:
        kernels = _per_example_kernels(alpha, bank)
        if bank.kind is ConvKind.STANDARD:
            return ops.conv2d_per_example(x, kernels, stride, padding)
        return ops.depthwise_conv2d_per_example(x, kernels, stride, padding)

    conv = ops.conv2d if bank.kind is ConvKind.STANDARD else ops.depthwise_conv2d
    out = None
    for i in range(bank.n):
        branch = conv(x, ops.index0(bank.experts, i), stride, padding)
        weighted = ops.batch_scale(branch, ops.column(alpha, i))
        out = weighted if out is None else ops.add(out, weighted)
    return out


def condconv_fc(
    x: Tensor,
    bank: ExpertBank,
    activation: str = "sigmoid",
    strategy: ExecutionStrategy = ExecutionStrategy.AUTO,
    alpha: Tensor | None = None,
) -> Tensor:
    """Conditional 1x1 / fully-connected layer on pooled [B, Din] input."""
    if bank.kind is not ConvKind.FC_1X1:
        raise ConfigError(f"condconv_fc requires an fc_1x1 bank, got {bank.kind}")
    if x.ndim != 2:
        raise ShapeError(f"condconv_fc: expected [B, Din] input, got {x.shape}")
    if x.shape[1] != bank.expert_shape[0]:
        raise ShapeError(
            f"condconv_fc: input features {x.shape} do not match experts "
            f"{bank.experts.shape}"
        )
    strategy = select_strategy(bank.n, strategy)
    alpha = _resolve_alpha(x, bank, activation, alpha)

    if strategy is ExecutionStrategy.FUSED:
        weights = _per_example_kernels(alpha, bank)
        return ops.matmul_per_example(x, weights)

    out = None
    for i in range(bank.n):
        branch = ops.matmul(x, ops.index0(bank.experts, i))
        weighted = ops.batch_scale(branch, ops.column(alpha, i))
        out = weighted if out is None else ops.add(out, weighted)
    return out
