"""Binary model files.

Layout (little-endian): ``b"LGNN"``, u32 format version, u32 length of a
JSON hyperparameter block and the block itself, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, u32 dims, f32 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..exceptions import MagicMismatchError, MissingArtifactError
from .model import ModelHyper, ModelParams

MODEL_MAGIC = b"LGNN"
FORMAT_VERSION = 1


def save_model(params: ModelParams, path, extra=None):
    """Write ``params`` as float32. ``extra`` is stored in the JSON block."""
    header = {"hyper": asdict(params.hyper)}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params.tensors))]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_model(path, with_extra=False):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"model file {path} not found")
    data = path.read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {MODEL_MAGIC!r}, got {data[:4]!r}")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        off = 12
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated model file") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    params = ModelParams(ModelHyper(**header["hyper"]), tensors)
    return (params, header.get("extra", {})) if with_extra else params
