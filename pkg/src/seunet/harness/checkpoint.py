"""Single-file checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"SEUNETCK"
    version u32
    meta    u64 length + UTF-8 JSON (sorted keys): config echo, sigma values, eta-tilde
    blocks  u32 count, then per block:
              u16 name length + UTF-8 name, u8 ndim, ndim x u32 dims,
              prod(dims) x float64 values
    crc32   u32 over everything before it
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..unet import SEUNet
from .config import ExperimentConfig
from .train import build_model

MAGIC = b"SEUNETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def metadata_for(model, config: ExperimentConfig) -> dict:
    meta = {"format_version": VERSION, "config": config.to_dict(),
            "model": "seunet" if isinstance(model, SEUNet) else "baseline"}
    if isinstance(model, SEUNet):
        meta["sigma_values"] = model.sigma_values()
        meta["eta_tilde"] = model.eta_tilde_values().tolist()
    return meta


def to_bytes(model, config: ExperimentConfig) -> bytes:
    meta = json.dumps(metadata_for(model, config), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode()
        arr = np.asarray(p.data, dtype="<f8")  # keeps 0-d latents 0-d
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(path, model, config: ExperimentConfig):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, config))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(buf: bytes) -> tuple[dict, dict]:
    """(metadata, {name: array}) from checkpoint bytes."""
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (n,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata section: {e}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes")
    if zlib.crc32(buf[:r.pos - 4]) != crc:
        raise CheckpointError("checksum mismatch; file is corrupt")
    return meta, arrays


def assign(model, arrays: dict):
    """Copy named arrays into ``model``; any name or shape difference is an error."""
    params = model.parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    bad = [f"{k}: model {params[k].data.shape} vs file {arrays[k].shape}"
           for k in params if k in arrays and params[k].data.shape != arrays[k].shape]
    if missing or extra or bad:
        raise CheckpointError("checkpoint does not fit the model; "
                              f"missing {missing}, unexpected {extra}, shape mismatches {bad}")
    for k, p in params.items():
        p.data = arrays[k].copy()
        p.zero_grad()


def load(path):
    """(model, config, metadata) rebuilt from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    meta, arrays = parse(buf)
    config = ExperimentConfig.from_dict(meta["config"]).validate()
    model = build_model(config)
    assign(model, arrays)
    return model, config, meta


def load_into(model, path) -> dict:
    with open(path, "rb") as fh:
        meta, arrays = parse(fh.read())
    assign(model, arrays)
    return meta
