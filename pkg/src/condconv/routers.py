"""Routing-function variants and router sharing across layers.

The baseline router is one zero-initialized matrix per conditional block,
applied to the pooled block input with a sigmoid. Ablation variants change
either the function (hidden layer, hierarchical input, softmax output) or the
assignment of routers to blocks (a single router reused everywhere, or one
router per pair of consecutive blocks). Swapping variants never changes
expert shapes, only router parameter shapes and the layer-to-router map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import fan_in_uniform, route
from .tensor import Tensor, default_dtype

__all__ = [
    "RouterConfig",
    "Router",
    "LinearRouter",
    "HiddenRouter",
    "HierarchicalRouter",
    "make_router",
    "RouterBinding",
    "bind_shared_routers",
    "HIDDEN_MULTIPLIERS",
    "VARIANTS",
]

VARIANTS = (
    "per_block",
    "single",
    "partially_shared",
    "hidden",
    "hierarchical",
    "softmax",
)

HIDDEN_MULTIPLIERS = {"small": 1.0 / 8.0, "medium": 1.0, "large": 8.0}


@dataclass(frozen=True)
class RouterConfig:
    """Which routing architecture a model uses.

    ``anchor_layer`` is the block whose router the ``single`` variant reuses
    everywhere. ``hidden_size`` picks the hidden width multiplier for the
    ``hidden`` variant: 1/8, 1, or 8 times the routed input dimension.
    """

    variant: str = "per_block"
    anchor_layer: int = 7
    hidden_size: str = "medium"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown router variant {self.variant!r}; choose one of {VARIANTS}"
            )
        if self.hidden_size not in HIDDEN_MULTIPLIERS:
            raise ConfigError(
                f"unknown hidden size {self.hidden_size!r}; choose small/medium/large"
            )

    @property
    def activation(self) -> str:
        return "softmax" if self.variant == "softmax" else "sigmoid"

    def hidden_width(self, input_dim: int) -> int:
        return max(1, round(HIDDEN_MULTIPLIERS[self.hidden_size] * input_dim))


class Router:
    """Base: maps a layer input (and optionally the previous alpha) to [B, n].

    ``evaluations`` counts forward evaluations so sharing can be asserted:
    a shared router must run exactly once per forward pass.
    """

    activation = "sigmoid"
    needs_previous_alpha = False

    def __init__(self, n: int):
        self.n = n
        self.evaluations = 0

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def madds(self) -> int:
        """Multiply-adds per example; pooling and squashing count zero."""
        return self.param_count()

    def _compute(self, x: Tensor, alpha_prev: Optional[Tensor]) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, alpha_prev: Optional[Tensor] = None) -> Tensor:
        self.evaluations += 1
        return self._compute(x, alpha_prev)


class LinearRouter(Router):
    """Pool, one matrix, squash — the baseline (and the softmax variant)."""

    def __init__(self, input_dim: int, n: int, activation: str = "sigmoid"):
        super().__init__(n)
        self.activation = activation
        self.matrix = Tensor(
            np.zeros((input_dim, n), dtype=default_dtype()), requires_grad=True
        )

    def parameters(self):
        return [self.matrix]

    def _compute(self, x, alpha_prev):
        return route(x, self.matrix, self.activation)


class HiddenRouter(Router):
    """Pool, hidden layer with ReLU, project, sigmoid."""

    def __init__(self, input_dim: int, n: int, hidden_width: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(n)
        rng = rng or np.random.default_rng(0)
        self.w_in = Tensor(
            fan_in_uniform((input_dim, hidden_width), input_dim, rng), requires_grad=True
        )
        self.w_out = Tensor(
            np.zeros((hidden_width, n), dtype=default_dtype()), requires_grad=True
        )

    def parameters(self):
        return [self.w_in, self.w_out]

    def _compute(self, x, alpha_prev):
        pooled = ops.global_average_pool(x) if x.ndim == 4 else x
        hidden = ops.relu(ops.matmul(pooled, self.w_in))
        return ops.sigmoid(ops.matmul(hidden, self.w_out))


class HierarchicalRouter(Router):
    """Consumes concat(pooled input, previous layer's routing weights)."""

    needs_previous_alpha = True

    def __init__(self, input_dim: int, n: int, prev_n: int):
        super().__init__(n)
        self.prev_n = prev_n
        self.matrix = Tensor(
            np.zeros((input_dim + prev_n, n), dtype=default_dtype()), requires_grad=True
        )

    def parameters(self):
        return [self.matrix]

    def _compute(self, x, alpha_prev):
        if alpha_prev is None:
            raise ConfigError(
                "hierarchical router needs the previous layer's routing weights"
            )
        pooled = ops.global_average_pool(x) if x.ndim == 4 else x
        feats = ops.concat_features(pooled, alpha_prev)
        return ops.sigmoid(ops.matmul(feats, self.matrix))


def make_router(
    config: RouterConfig,
    input_dim: int,
    n: int,
    prev_n: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Router:
    """Build one router for a layer whose routed input has ``input_dim``
    channels. ``prev_n`` is the expert count of the preceding conditional
    layer; required by (and only by) the hierarchical variant.
    """
    if config.variant == "hidden":
        return HiddenRouter(input_dim, n, config.hidden_width(input_dim), rng)
    if config.variant == "hierarchical":
        if prev_n is None:
            raise ConfigError(
                "hierarchical routing requires a preceding conditional layer"
            )
        return HierarchicalRouter(input_dim, n, prev_n)
    return LinearRouter(input_dim, n, config.activation)


@dataclass
class RouterBinding:
    """Assignment of conditional units to shared routers.

    ``assignment`` maps every conditional unit (block index or ``"fc"``) to a
    router id; ``eval_site`` maps each router id to the unit at whose input
    the router runs. Units appear in network order.
    """

    assignment: dict
    eval_site: dict

    @property
    def router_ids(self) -> list:
        return list(self.eval_site.keys())


def bind_shared_routers(units: Sequence[Hashable], config: RouterConfig) -> RouterBinding:
    """Group conditional units under routers according to the variant.

    ``per_block`` (and the function-only variants): one router per unit.
    ``single``: one router at the anchor block, reused by every unit.
    ``partially_shared``: consecutive units paired in network order, one router
    per pair evaluated at the pair's first unit; a trailing unpaired unit gets
    its own router.
    """
    units = list(units)
    if not units:
        return RouterBinding({}, {})
    variant = config.variant

    if variant == "single":
        anchor = config.anchor_layer
        if anchor not in units:
            raise ConfigError(
                f"single-router anchor {anchor!r} is not a conditional unit "
                f"(units: {units})"
            )
        return RouterBinding({u: anchor for u in units}, {anchor: anchor})

    if variant == "partially_shared":
        assignment, eval_site = {}, {}
        for i in range(0, len(units), 2):
            pair = units[i : i + 2]
            head = pair[0]
            eval_site[head] = head
            for u in pair:
                assignment[u] = head
        return RouterBinding(assignment, eval_site)

    return RouterBinding({u: u for u in units}, {u: u for u in units})
