"""Checkpoint container.

Layout::

    b"GTNCKPT1"
    u64 little-endian manifest length
    manifest: UTF-8 JSON {format_version, dtype, config, tensors: [
        {name, kind: param|buffer, shape, offset, length}, ...]}
    blob: raw little-endian floats of ``dtype``, row-major, in table order

Offsets are relative to the start of the blob.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import GTNet, ModelConfig

MAGIC = b"GTNCKPT1"
FORMAT_VERSION = 1

# config fields that change the parameter set or the forward computation
ARCH_FIELDS = (
    "task", "blocks", "k", "num_classes", "num_parts", "use_alignment", "use_feature_encoding",
    "encoding_kind", "use_global", "use_local", "use_residual", "scaled_global", "aggregation",
    "graph_basis", "dtype", "shape_width", "label_width", "cls_hidden", "seg_hidden",
)


class CheckpointError(ValueError):
    pass


def _entries(model: GTNet):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, buf in model.named_buffers():
        yield name, "buffer", buf


def save_checkpoint(model: GTNet, path: Union[str, Path]) -> None:
    dtype = np.dtype(model.config.dtype).newbyteorder("<")
    table, chunks, offset = [], [], 0
    for name, kind, arr in _entries(model):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({"name": name, "kind": kind, "shape": list(arr.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "dtype": dtype.str,
                "config": model.config.to_dict(), "tensors": table}
    head = json.dumps(manifest, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_manifest(path: Union[str, Path]) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a GTNet checkpoint")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(raw[16:16 + n].decode())
    return manifest, raw[16 + n:]


def config_mismatch(saved: ModelConfig, requested: ModelConfig) -> Optional[str]:
    """Describe the first architecture difference, or None."""
    a, b = saved.to_dict(), requested.to_dict()
    for key in ARCH_FIELDS:
        if a[key] == b[key]:
            continue
        if isinstance(a[key], list) and isinstance(b[key], list):
            for i, (x, y) in enumerate(zip(a[key], b[key])):
                if x != y:
                    return f"{key}[{i}]: checkpoint {x} vs requested {y}"
            return f"{key}: checkpoint has {len(a[key])} entries, requested {len(b[key])}"
        return f"{key}: checkpoint {a[key]!r} vs requested {b[key]!r}"
    return None


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> GTNet:
    manifest, blob = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version} (expected {FORMAT_VERSION})")
    saved = ModelConfig.from_dict(manifest["config"])
    if config is not None:
        diff = config_mismatch(saved, config)
        if diff:
            raise CheckpointError(f"config mismatch at {diff}")
    model = GTNet(saved)
    targets = {name: arr for name, _, arr in _entries(model)}
    dtype = np.dtype(manifest["dtype"])
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise CheckpointError(f"unknown parameter name {name!r}")
        start, length = entry["offset"], entry["length"]
        if start + length > len(blob):
            raise CheckpointError(f"truncated blob for {name!r}")
        values = np.frombuffer(blob, dtype=dtype, count=length // dtype.itemsize, offset=start)
        dst = targets[name]
        if tuple(entry["shape"]) != dst.shape or values.size != dst.size:
            raise CheckpointError(f"shape mismatch for {name!r}")
        dst[...] = values.reshape(dst.shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[0]!r}")
    return model
