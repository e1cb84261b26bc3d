"""Dataset ingestion: IDX files, image directories with a label CSV, and a
seeded synthetic generator.

The synthetic sets are class-conditional Gaussian blobs: each class has its
own blob location, with per-example jitter in position, width, and amplitude,
plus pixel noise. Classes are visually distinct clusters, which makes the
sets suitable both for capacity checks and for routing-weight analyses.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DataFormatError

__all__ = [
    "Dataset",
    "read_idx",
    "write_idx",
    "synthetic_blobs",
    "parse_synthetic_spec",
    "load_dataset",
    "save_dataset",
    "split_train_val",
]

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


@dataclass
class Dataset:
    """Images [N, H, W, C], integer labels [N], and bookkeeping."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "all"
    channel_mean: np.ndarray = field(default=None)
    channel_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N,H,W,C], got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise DataFormatError(
                f"labels shape {self.labels.shape} does not match {len(self.images)} images"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataFormatError(
                f"label {int(self.labels.max())} >= class count {self.num_classes}"
            )
        if self.channel_mean is None:
            self.channel_mean = self.images.mean(axis=(0, 1, 2))
        if self.channel_std is None:
            self.channel_std = self.images.std(axis=(0, 1, 2))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            split or self.split,
            self.channel_mean,
            self.channel_std,
        )


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Deterministic shuffled split; normalization metadata is shared."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val fraction must be in (0,1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(val_fraction * len(ds))))
    return ds.subset(order[n_val:], "train"), ds.subset(order[:n_val], "val")


# ---------------------------------------------------------------------------
# IDX files


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    key = arr.dtype.newbyteorder("=")
    if key not in _IDX_CODES:
        raise DataFormatError(f"dtype {arr.dtype} not representable in IDX")
    code = _IDX_CODES[key]
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, code, arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack(">I", dim))
        f.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise DataFormatError(f"{path}: bad IDX magic {head!r}")
        code, ndim = head[2], head[3]
        if code not in _IDX_DTYPES:
            raise DataFormatError(f"{path}: unknown IDX dtype code 0x{code:02x}")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        dtype = _IDX_DTYPES[code]
        payload = f.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return (
        np.frombuffer(payload, dtype=dtype)
        .reshape(dims)
        .astype(dtype.newbyteorder("="))
    )


# ---------------------------------------------------------------------------
# synthetic blobs


def synthetic_blobs(
    classes: int = 4,
    per_class: int = 500,
    size: int = 16,
    channels: int = 1,
    noise: float = 0.1,
    jitter: float = 2.0,
    seed: int = 7,
) -> Dataset:
    """Balanced class-conditional Gaussian-blob images, shuffled, seeded.

    The class determines the blob width (a ladder of sigmas); position,
    amplitude, and exact width jitter per example, plus pixel noise. Classes
    are therefore visually distinct clusters that survive global pooling,
    while no single statistic is noise-free.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    # the width ladder spans a fixed range, so fewer classes are further apart
    sigmas = np.linspace(1.1, 2.3, classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    n = classes * per_class
    images = np.empty((n, size, size, channels), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, cls in enumerate(labels):
        cy, cx = size / 2.0 + rng.uniform(-jitter, jitter, size=2)
        sigma = sigmas[cls] * rng.uniform(0.92, 1.08)
        amp = rng.uniform(0.8, 1.2)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img = blob[:, :, None] + noise * rng.standard_normal((size, size, channels))
        images[i] = img.astype(np.float32)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order].astype(np.int64), classes, "all")


def parse_synthetic_spec(spec: str) -> dict:
    """Parse 'synthetic:classes=4,per_class=500,seed=7' style specs."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    kwargs: dict = {}
    if body:
        for item in body.split(","):
            key, _, value = item.partition("=")
            key = key.strip()
            if key in ("classes", "per_class", "size", "channels", "seed"):
                kwargs[key] = int(value)
            elif key in ("noise", "jitter"):
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown synthetic dataset key {key!r}")
    return kwargs


# ---------------------------------------------------------------------------
# loading and saving


def _load_image_dir_csv(path) -> Dataset:
    from PIL import Image

    csv_path = os.path.join(path, "labels.csv")
    if not os.path.exists(csv_path):
        raise DataFormatError(f"{path}: no labels.csv found")
    rows = []
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or {"filename", "label"} - set(reader.fieldnames):
            raise DataFormatError(f"{csv_path}: expected columns filename,label")
        for row in reader:
            rows.append((row["filename"], int(row["label"])))
    if not rows:
        raise DataFormatError(f"{csv_path}: no rows")
    images, labels = [], []
    for filename, label in rows:
        with Image.open(os.path.join(path, filename)) as im:
            arr = np.asarray(im, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(arr)
        labels.append(label)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{path}: images have mixed shapes {sorted(shapes)}")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.stack(images), labels, int(labels.max()) + 1, "all")


def load_dataset(path: str, format: Optional[str] = None) -> Dataset:
    """Load a dataset.

    ``format`` is one of ``idx`` (directory with images.idx / labels.idx),
    ``image-dir-csv`` (directory of images plus labels.csv), or ``synthetic``
    (``path`` is a spec string like ``synthetic:classes=4,per_class=500,seed=7``).
    When omitted, the format is inferred.
    """
    if format is None:
        if path.startswith("synthetic"):
            format = "synthetic"
        elif os.path.isdir(path) and os.path.exists(os.path.join(path, "images.idx")):
            format = "idx"
        elif os.path.isdir(path) and os.path.exists(os.path.join(path, "labels.csv")):
            format = "image-dir-csv"
        else:
            raise DataFormatError(f"cannot infer dataset format for {path!r}")

    if format == "synthetic":
        return synthetic_blobs(**parse_synthetic_spec(path))
    if format == "idx":
        images = read_idx(os.path.join(path, "images.idx"))
        labels = read_idx(os.path.join(path, "labels.idx")).astype(np.int64)
        if images.ndim == 3:
            images = images[:, :, :, None]
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        return Dataset(
            np.ascontiguousarray(images), labels, int(labels.max()) + 1, "all"
        )
    if format == "image-dir-csv":
        return _load_image_dir_csv(path)
    raise ConfigError(f"unknown dataset format {format!r}")


def save_dataset(ds: Dataset, path: str) -> None:
    """Write images.idx / labels.idx; float images round-trip bitwise."""
    os.makedirs(path, exist_ok=True)
    write_idx(os.path.join(path, "images.idx"), ds.images)
    write_idx(os.path.join(path, "labels.idx"), ds.labels.astype(np.int32))
