"""Binary checkpoints: magic "DPTD", version, config, named float64 blobs.

Layout (all little-endian):
    4 bytes  magic "DPTD"
    u32      format version (1)
    u32      config text length, then that many UTF-8 bytes (key=value lines)
    u32      blob count, then per blob:
                 u16 name length + UTF-8 name
                 u8 ndim, ndim x u32 dims
                 float64 data, row-major
    u8       optimizer-state flag; if 1: u64 step count, then u32 blob
             count and the same blob encoding for Adam m/v moments

Values are stored as float64 even for float32 models: exact round trips
beat file-size economy. Writes go through a temp file and os.replace.
"""

from __future__ import annotations

import os
import struct
from typing import Optional

import numpy as np

from .config import (
    model_config_from_mapping,
    model_config_to_mapping,
    parse_config_text,
    serialize_config,
)
from .errors import CheckpointError
from .model import ModelConfig, ModelWeights, init_weights
from .training import AdamState

MAGIC = b"DPTD"
VERSION = 1


def _pack_blob(name: str, data: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", data.ndim)]
    parts += [struct.pack("<I", dim) for dim in data.shape]
    parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob_entry(self) -> tuple:
        name = self.take(self.u16()).decode("utf-8")
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data


def save_checkpoint(
    path: str,
    cfg: ModelConfig,
    weights: ModelWeights,
    opt_state: Optional[AdamState] = None,
) -> None:
    config_text = serialize_config(model_config_to_mapping(cfg)).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config_text)), config_text]
    named = list(weights.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named:
        parts.append(_pack_blob(name, tensor.data))
    if opt_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q", opt_state.t))
        moments = []
        for (name, _), m, v in zip(named, opt_state.m, opt_state.v):
            moments.append((f"m.{name}", m))
            moments.append((f"v.{name}", v))
        parts.append(struct.pack("<I", len(moments)))
        for name, data in moments:
            parts.append(_pack_blob(name, data))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(
    path: str, expect_cfg: Optional[ModelConfig] = None
) -> tuple[ModelConfig, ModelWeights, Optional[AdamState]]:
    """Rebuild (config, weights, optional optimizer state) from a file.

    When ``expect_cfg`` is given, the stored config must produce identically
    shaped weights; a desk-preset checkpoint is rejected by a paper-preset
    expectation.
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a model checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg = model_config_from_mapping(parse_config_text(reader.take(reader.u32()).decode("utf-8")))

    weights = init_weights(cfg, seed=cfg.seed)
    expected = dict(weights.named_parameters())
    n_blobs = reader.u32()
    seen = set()
    for _ in range(n_blobs):
        name, data = reader.blob_entry()
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
        target = expected[name]
        if tuple(data.shape) != tuple(target.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: file has {data.shape}, config needs {target.data.shape}"
            )
        target.data = data.astype(cfg.np_dtype(), copy=True)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)[:3]} ...")

    opt_state = None
    if reader.u8() == 1:
        t = reader.u64()
        count = reader.u32()
        moments = dict(reader.blob_entry() for _ in range(count))
        m, v = [], []
        for name, _ in weights.named_parameters():
            try:
                m.append(moments[f"m.{name}"].copy())
                v.append(moments[f"v.{name}"].copy())
            except KeyError as exc:
                raise CheckpointError(f"optimizer state missing moments for {name!r}") from exc
        opt_state = AdamState(m=m, v=v, t=t)

    if expect_cfg is not None:
        shape_fields = ("d", "heads", "n_blocks", "chunk_len", "hop", "encoder_kernel", "max_chunks")
        for name in shape_fields:
            if getattr(cfg, name) != getattr(expect_cfg, name):
                raise CheckpointError(
                    f"checkpoint {name}={getattr(cfg, name)} does not match "
                    f"expected {name}={getattr(expect_cfg, name)}"
                )
    return cfg, weights, opt_state
