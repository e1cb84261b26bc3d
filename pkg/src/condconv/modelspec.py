"""Declarative layer-by-layer architecture description.

A :class:`ModelSpec` is consumed both by the model builder (to materialize
parameters) and by the cost model (to count multiply-adds analytically), so
the two can never disagree about what a model contains. Specs round-trip
through a one-layer-per-line text manifest that is also embedded in
checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

from .errors import ConfigError
from .routers import RouterConfig

__all__ = ["LayerDef", "ModelSpec", "validate"]

LAYER_KINDS = ("stem", "dw", "pw", "gap", "fc")

# Unit key used for the classifier in router bindings and traces.
FC_UNIT = "fc"


@dataclass(frozen=True)
class LayerDef:
    """One layer: kind, kernel extent, stride, channels, conditional flag.

    ``block`` groups the depthwise and pointwise halves of a separable block
    (they share one router); it is 0 for the stem and None for gap/fc.
    """

    kind: str
    k: int
    stride: int
    cin: int
    cout: int
    condconv: bool = False
    block: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def unit(self):
        """Router-binding key: block index for conv layers, 'fc' for the head."""
        return FC_UNIT if self.kind == "fc" else self.block


@dataclass
class ModelSpec:
    """Architecture plus the conditional-computation settings."""

    layers: List[LayerDef]
    width_multiplier: float = 1.0
    num_experts: int = 1
    condconv_begin_layer: Optional[int] = None
    use_cc_classifier: bool = False
    router: RouterConfig = field(default_factory=RouterConfig)
    num_classes: int = 1000
    arch: str = "custom"

    def condconv_units(self) -> list:
        """Conditional units (block ids and possibly 'fc') in network order."""
        seen, units = set(), []
        for layer in self.layers:
            if layer.condconv and layer.unit not in seen:
                seen.add(layer.unit)
                units.append(layer.unit)
        return units

    def num_blocks(self) -> int:
        return len({l.block for l in self.layers if l.kind in ("dw", "pw")})

    # ------------------------------------------------------------------
    # manifest round-trip
    def to_manifest(self) -> str:
        lines = [
            f"arch={self.arch}",
            f"width_multiplier={self.width_multiplier!r}",
            f"num_experts={self.num_experts}",
            f"condconv_begin_layer={self.condconv_begin_layer if self.condconv_begin_layer is not None else 'none'}",
            f"use_cc_classifier={'true' if self.use_cc_classifier else 'false'}",
            f"router={self.router.variant}",
            f"router_anchor={self.router.anchor_layer}",
            f"router_hidden={self.router.hidden_size}",
            f"num_classes={self.num_classes}",
        ]
        for l in self.layers:
            flags = "condconv" if l.condconv else "static"
            block = l.block if l.block is not None else "-"
            lines.append(
                f"layer {l.kind} k={l.k} s={l.stride} cin={l.cin} cout={l.cout} "
                f"block={block} {flags}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ModelSpec":
        header: dict[str, str] = {}
        layers: list[LayerDef] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("layer "):
                parts = line.split()
                kind = parts[1]
                kv = dict(p.split("=", 1) for p in parts[2:-1])
                flag = parts[-1]
                block = None if kv["block"] == "-" else int(kv["block"])
                layers.append(
                    LayerDef(
                        kind=kind,
                        k=int(kv["k"]),
                        stride=int(kv["s"]),
                        cin=int(kv["cin"]),
                        cout=int(kv["cout"]),
                        condconv=(flag == "condconv"),
                        block=block,
                    )
                )
            else:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
        missing = {"num_experts", "num_classes"} - header.keys()
        if missing:
            raise ConfigError(f"manifest missing header keys: {sorted(missing)}")
        begin = header.get("condconv_begin_layer", "none")
        return cls(
            layers=layers,
            width_multiplier=float(header.get("width_multiplier", "1.0")),
            num_experts=int(header["num_experts"]),
            condconv_begin_layer=None if begin == "none" else int(begin),
            use_cc_classifier=header.get("use_cc_classifier", "false") == "true",
            router=RouterConfig(
                variant=header.get("router", "per_block"),
                anchor_layer=int(header.get("router_anchor", "7")),
                hidden_size=header.get("router_hidden", "medium"),
            ),
            num_classes=int(header["num_classes"]),
            arch=header.get("arch", "custom"),
        )


def validate(spec: ModelSpec) -> list[str]:
    """Structural checks; returns a list of violations (empty when valid)."""
    violations: list[str] = []
    prev_cout = None
    for i, layer in enumerate(spec.layers):
        if prev_cout is not None and layer.cin != prev_cout:
            violations.append(
                f"layer {i} ({layer.kind}): cin {layer.cin} does not match "
                f"previous cout {prev_cout}"
            )
        if layer.kind == "dw" and layer.cin != layer.cout:
            violations.append(f"layer {i}: depthwise must preserve channels")
        prev_cout = layer.cout

    blocks: dict[int, list[LayerDef]] = {}
    for layer in spec.layers:
        if layer.kind in ("dw", "pw"):
            blocks.setdefault(layer.block, []).append(layer)
    for block, members in blocks.items():
        kinds = [m.kind for m in members]
        if kinds != ["dw", "pw"]:
            violations.append(f"block {block}: expected dw then pw, got {kinds}")
        flags = {m.condconv for m in members}
        if len(flags) > 1:
            violations.append(f"block {block}: dw/pw conditional flags disagree")

    begin = spec.condconv_begin_layer
    if begin is not None:
        for layer in spec.layers:
            if layer.condconv and layer.kind in ("dw", "pw") and layer.block < begin:
                violations.append(
                    f"block {layer.block}: conditional layer before begin layer {begin}"
                )
    else:
        for layer in spec.layers:
            if layer.condconv and layer.kind in ("dw", "pw"):
                violations.append(
                    f"block {layer.block}: conditional layer with begin layer 'none'"
                )

    units = spec.condconv_units()
    if units:
        # Under the hierarchical variant the first conditional unit falls back
        # to a plain linear router (it has no predecessor whose weights it
        # could consume), so the variant needs at least two units to exist.
        if spec.router.variant == "hierarchical" and len(units) < 2:
            violations.append(
                f"unit {units[0]}: hierarchical router at the first (and only) "
                "conditional layer has no predecessor to take routing weights from"
            )
        if spec.router.variant == "single" and spec.router.anchor_layer != units[0]:
            violations.append(
                f"single-router anchor {spec.router.anchor_layer} must be the first "
                f"conditional unit ({units[0]})"
            )
    return violations
