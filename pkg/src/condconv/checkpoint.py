"""Checkpoint files: a text manifest plus a flat little-endian parameter
buffer with per-tensor offsets and a CRC-32 checksum.

The manifest embeds the architecture (the ModelSpec text manifest) and a
tensor table, so a checkpoint is self-describing: loading rebuilds the model
and copies the buffer back in. Saving a just-loaded model reproduces the file
byte for byte.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .errors import CheckpointError
from .modelspec import ModelSpec
from .tensor import Tensor
from .zoo import Model, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_bytes"]

_MAGIC = "condconv-checkpoint v1"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize a model to the checkpoint wire format."""
    names = []
    blobs = []
    offset = 0
    table_lines = []
    for name, p in model.named_parameters():
        dtype = str(p.data.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"parameter {name} has unsupported dtype {dtype}")
        blob = np.ascontiguousarray(p.data).astype(_DTYPES[dtype]).tobytes()
        shape = ",".join(str(s) for s in p.data.shape)
        table_lines.append(f"{name} {dtype} {shape} {offset} {len(blob)}")
        offset += len(blob)
        names.append(name)
        blobs.append(blob)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in model")

    buffer = b"".join(blobs)
    manifest = (
        "[spec]\n"
        + model.spec.to_manifest()
        + "[tensors]\n"
        + "\n".join(table_lines)
        + "\n"
    ).encode()
    header = (
        f"{_MAGIC}\n"
        f"manifest-bytes: {len(manifest)}\n"
        f"buffer-bytes: {len(buffer)}\n"
        f"checksum-crc32: {zlib.crc32(buffer):08x}\n"
        "\n"
    ).encode()
    return header + manifest + buffer


def save_checkpoint(model: Model, path: str) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    payload = checkpoint_bytes(model)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _parse_header(raw: bytes):
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    lines = raw[:end].decode(errors="replace").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"not a checkpoint file (magic {lines[:1]!r})")
    kv = {}
    for line in lines[1:]:
        key, _, value = line.partition(":")
        kv[key.strip()] = value.strip()
    try:
        return int(kv["manifest-bytes"]), int(kv["buffer-bytes"]), kv["checksum-crc32"], end + 2
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    manifest_len, buffer_len, checksum, body_start = _parse_header(raw)
    manifest_raw = raw[body_start : body_start + manifest_len]
    buffer = raw[body_start + manifest_len :]
    if len(manifest_raw) != manifest_len or len(buffer) != buffer_len:
        raise CheckpointError(
            f"checkpoint length mismatch: manifest {len(manifest_raw)}/{manifest_len}, "
            f"buffer {len(buffer)}/{buffer_len}"
        )
    if f"{zlib.crc32(buffer):08x}" != checksum:
        raise CheckpointError("checkpoint buffer checksum mismatch")

    spec_text, _, table_text = manifest_raw.decode().partition("[tensors]\n")
    if not spec_text.startswith("[spec]\n"):
        raise CheckpointError("checkpoint manifest missing [spec] section")
    spec = ModelSpec.from_manifest(spec_text[len("[spec]\n") :])
    model = build_model(spec, seed=0)

    expected = dict(model.named_parameters())
    seen = set()
    for line in table_text.strip().splitlines():
        name, dtype, shape_s, offset_s, nbytes_s = line.split()
        if name not in expected:
            raise CheckpointError(f"checkpoint tensor {name!r} not in model")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        offset, nbytes = int(offset_s), int(nbytes_s)
        if offset + nbytes > len(buffer):
            raise CheckpointError(f"tensor {name!r} extends past buffer end")
        arr = np.frombuffer(buffer[offset : offset + nbytes], dtype=_DTYPES[dtype])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name!r} size does not match its shape")
        param = expected[name]
        if shape != param.data.shape:
            raise CheckpointError(
                f"tensor {name!r} shape {shape} does not match model {param.data.shape}"
            )
        param.data = arr.reshape(shape).astype(np.dtype(dtype), copy=True)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return model
