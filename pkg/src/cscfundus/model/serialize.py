"""Self-describing binary model files.

Layout (little-endian): magic ``CSCM``; u32 format version; u32 byte length
and UTF-8 JSON of the ModelSpec; then for each parameter in spec order a
u32 rank, ``rank`` u32 dims and the float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ModelSpec, Params

MAGIC = b"CSCM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def save_model(params: Params, spec: ModelSpec, path) -> Path:
    shapes = spec.param_shapes()
    if list(params) != list(shapes):
        raise ValueError("parameter names do not match the model spec")
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name, shape in shapes.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            fh.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ModelFormatError("truncated model file")
    return data


def load_model(path) -> tuple[Params, ModelSpec]:
    """Read a model file; the spec comes from the file itself."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ModelFormatError("unrecognized format")
        version, n = struct.unpack("<II", _read(fh, 8))
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        try:
            spec = ModelSpec.from_dict(json.loads(_read(fh, n).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise ModelFormatError(f"bad model spec: {exc}") from exc
        params: Params = {}
        for name, shape in spec.param_shapes().items():
            (rank,) = struct.unpack("<I", _read(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            if tuple(dims) != shape:
                raise ModelFormatError(f"{name}: stored shape {dims} != expected {shape}")
            count = int(np.prod(dims))
            params[name] = np.frombuffer(_read(fh, 4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        if fh.read(1):
            raise ModelFormatError("trailing data after last tensor")
    return params, spec
