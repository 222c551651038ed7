"""Binary checkpoints of model parameters.

Layout (little-endian)::

    b"PRNET\\0"  u16 version  u32 config_len  config_len bytes of UTF-8 JSON
    every parameter tensor as f32, in declaration order

The JSON block holds the pipeline configuration (all layer widths, W, m, K
and thresholds) and the initialization seed. Parameters are stored as
float32, so a checkpoint of float64 weights rounds them once; after that
write/read/write is byte-stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError
from .pipeline import CHECKPOINT_VERSION, ModelParams, PipelineConfig

MAGIC = b"PRNET\0"
_HEAD = struct.Struct("<6sHI")


def checkpoint_bytes(params: ModelParams) -> bytes:
    params.check()
    meta = {"config": params.config.to_dict(), "seed": int(params.seed)}
    block = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, params.version, len(block)), block]
    for name, _ in params.model.param_shapes():
        parts.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> ModelParams:
    if len(data) < _HEAD.size:
        if len(data) == 0 or not MAGIC.startswith(data[:6]):
            raise FormatError("not a PRNET checkpoint")
        raise CorruptFileError("truncated checkpoint header", len(data))
    magic, version, block_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}: not a PRNET checkpoint")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    if off + block_len > len(data):
        raise CorruptFileError("truncated config block", off)
    try:
        meta = json.loads(data[off : off + block_len].decode("utf-8"))
        config = PipelineConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}") from exc
    off += block_len

    params = ModelParams(config, {}, int(meta.get("seed", 0)), version)
    for name, shape in params.model.param_shapes():
        count = int(np.prod(shape))
        if off + 4 * count > len(data):
            raise CorruptFileError(f"truncated parameter {name}", off)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        params.tensors[name] = arr.astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(data):
        raise CorruptFileError(f"{len(data) - off} unexpected trailing bytes", off)
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes())
