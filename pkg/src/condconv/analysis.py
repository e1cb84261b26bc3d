"""Routing-weight analysis over an evaluated dataset.

A trace records, for every conditional layer, the alpha matrix [N, n] across
all N evaluated examples, aligned with the label vector. All analyses are
pure functions of the trace: per-class mean routing weights, the global
weight histogram, a class-specificity-by-depth series, and per-expert class
rankings.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .tensor import Tensor, inference_mode
from .zoo import Model

__all__ = [
    "TraceLayer",
    "RoutingTrace",
    "collect_trace",
    "per_class_mean",
    "routing_histogram",
    "class_specificity_by_depth",
    "top_classes_per_expert",
    "exemplar_indices",
    "trace_to_csv",
    "trace_from_csv",
    "save_trace_npz",
    "load_trace_npz",
]


@dataclass
class TraceLayer:
    """Alpha values of one conditional layer over the traced dataset."""

    layer_index: int          # position in the model's layer list
    unit: str                 # block id or 'fc'
    depth: int                # ordinal among conditional layers
    alpha: np.ndarray         # [N, n]


@dataclass
class RoutingTrace:
    layers: List[TraceLayer]
    labels: np.ndarray
    num_classes: int

    def layer(self, layer_index: int) -> TraceLayer:
        for tl in self.layers:
            if tl.layer_index == layer_index:
                return tl
        raise KeyError(f"no traced layer with index {layer_index}")

    def __len__(self) -> int:
        return len(self.labels)


def collect_trace(model: Model, ds: Dataset, batch_size: int = 128) -> RoutingTrace:
    """Forward the dataset in inference mode, recording alpha everywhere."""
    chunks: dict[int, list[np.ndarray]] = {}
    units: dict[int, str] = {}
    with inference_mode():
        for start in range(0, len(ds), batch_size):
            record: dict = {}
            model.forward(Tensor(ds.images[start : start + batch_size]), record=record)
            for layer_index, (unit, alpha) in record.items():
                chunks.setdefault(layer_index, []).append(alpha)
                units[layer_index] = str(unit)
    layers = [
        TraceLayer(idx, units[idx], depth, np.concatenate(chunks[idx], axis=0))
        for depth, idx in enumerate(sorted(chunks))
    ]
    for tl in layers:
        if len(tl.alpha) != len(ds):
            raise ConfigError(
                f"trace layer {tl.layer_index} has {len(tl.alpha)} rows for "
                f"{len(ds)} examples"
            )
    return RoutingTrace(layers, ds.labels.copy(), ds.num_classes)


def per_class_mean(trace: RoutingTrace, layer_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of alpha per class: two [C, n] matrices."""
    tl = trace.layer(layer_index)
    n = tl.alpha.shape[1]
    means = np.zeros((trace.num_classes, n))
    stds = np.zeros((trace.num_classes, n))
    for c in range(trace.num_classes):
        rows = tl.alpha[trace.labels == c]
        if len(rows):
            means[c] = rows.mean(axis=0)
            stds[c] = rows.std(axis=0)
    return means, stds


def routing_histogram(trace: RoutingTrace, layer_index: int, bins: int = 20) -> np.ndarray:
    """Counts over uniform bins spanning [0, 1]; they sum to N * n."""
    tl = trace.layer(layer_index)
    counts, _ = np.histogram(tl.alpha.ravel(), bins=bins, range=(0.0, 1.0))
    return counts


def class_specificity_by_depth(trace: RoutingTrace) -> List[Tuple[int, float]]:
    """Between-class variance of routing, per layer depth.

    The metric is the variance across per-class mean weights, averaged over
    experts: zero when every class routes identically, growing as routing
    becomes class-specific.
    """
    series = []
    for tl in trace.layers:
        means, _ = per_class_mean(trace, tl.layer_index)
        series.append((tl.depth, float(means.var(axis=0).mean())))
    return series


def top_classes_per_expert(class_means: np.ndarray, expert: int, k: int) -> List[int]:
    """Classes ranked by mean routing weight for one expert.

    Ties break toward the lower class index (stable order).
    """
    num_classes = class_means.shape[0]
    if not 0 <= expert < class_means.shape[1]:
        raise ConfigError(f"expert {expert} out of range for {class_means.shape[1]}")
    order = np.lexsort((np.arange(num_classes), -class_means[:, expert]))
    return [int(c) for c in order[:k]]


def exemplar_indices(trace: RoutingTrace, layer_index: int, expert: int) -> np.ndarray:
    """Per class, the index of the example with the highest routing weight."""
    tl = trace.layer(layer_index)
    out = np.full(trace.num_classes, -1, dtype=np.int64)
    weights = tl.alpha[:, expert]
    for c in range(trace.num_classes):
        idx = np.nonzero(trace.labels == c)[0]
        if len(idx):
            out[c] = idx[np.argmax(weights[idx])]
    return out


# ---------------------------------------------------------------------------
# persistence


def trace_to_csv(trace: RoutingTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "example_index", "label", "expert_index", "alpha"])
    for tl in trace.layers:
        n = tl.alpha.shape[1]
        for i in range(len(tl.alpha)):
            label = int(trace.labels[i])
            for e in range(n):
                writer.writerow([tl.layer_index, i, label, e, repr(float(tl.alpha[i, e]))])
    return buf.getvalue()


def trace_from_csv(text: str, num_classes: Optional[int] = None) -> RoutingTrace:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["layer", "example_index", "label", "expert_index", "alpha"]:
        raise ConfigError(f"unexpected trace CSV header: {header}")
    cells: dict[int, dict] = {}
    labels: dict[int, int] = {}
    for layer_s, idx_s, label_s, expert_s, alpha_s in reader:
        layer, i, e = int(layer_s), int(idx_s), int(expert_s)
        labels[i] = int(label_s)
        cells.setdefault(layer, {})[(i, e)] = float(alpha_s)
    n_examples = max(labels) + 1
    label_arr = np.array([labels[i] for i in range(n_examples)], dtype=np.int64)
    layers = []
    for depth, layer in enumerate(sorted(cells)):
        entries = cells[layer]
        n = max(e for _, e in entries) + 1
        alpha = np.zeros((n_examples, n))
        for (i, e), value in entries.items():
            alpha[i, e] = value
        layers.append(TraceLayer(layer, str(layer), depth, alpha))
    return RoutingTrace(
        layers, label_arr, num_classes or int(label_arr.max()) + 1
    )


def save_trace_npz(trace: RoutingTrace, path: str) -> None:
    arrays = {"labels": trace.labels, "num_classes": np.array(trace.num_classes)}
    meta = []
    for tl in trace.layers:
        arrays[f"alpha_{tl.layer_index}"] = tl.alpha
        meta.append((tl.layer_index, tl.unit, tl.depth))
    arrays["meta"] = np.array([f"{i}:{u}:{d}" for i, u, d in meta])
    np.savez_compressed(path, **arrays)


def load_trace_npz(path: str) -> RoutingTrace:
    with np.load(path, allow_pickle=False) as z:
        labels = z["labels"]
        num_classes = int(z["num_classes"])
        layers = []
        for entry in z["meta"]:
            idx_s, unit, depth_s = str(entry).split(":")
            layers.append(
                TraceLayer(int(idx_s), unit, int(depth_s), z[f"alpha_{idx_s}"])
            )
    return RoutingTrace(layers, labels, num_classes)
