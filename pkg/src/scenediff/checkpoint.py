"""Byte-stable parameter checkpoints.

Layout: magic ``SDCK``, u32 version, u32 length-prefixed UTF-8 JSON
header (model config, guidance mode, schedule), u32 tensor count, then per
tensor: u32 name length, name, u32 ndim, u32 dims, float32 little-endian
payload. Tensors are written in sorted-name order so identical parameters
always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig

MAGIC = b"SDCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


def save_checkpoint(path, model: Denoiser, schedule_info: dict,
                    extra: dict | None = None):
    header = {
        "config": model.cfg.to_dict(),
        "schedule": schedule_info,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<I", len(payload)), payload]
    named = sorted(model.named_params(), key=lambda kv: kv[0])
    chunks.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(p.v.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    """Rebuild the model (float64 weights from the float32 payload) and
    return it with the header dict."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hlen, = struct.unpack("<I", raw[8:12])
    pos = 12
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    pos += hlen
    count, = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            nlen, = struct.unpack("<I", raw[pos:pos + 4]); pos += 4
            name = raw[pos:pos + nlen].decode("utf-8"); pos += nlen
            ndim, = struct.unpack("<I", raw[pos:pos + 4]); pos += 4
            shape = struct.unpack(f"<{ndim}I", raw[pos:pos + 4 * ndim])
            pos += 4 * ndim
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated tensor table ({exc})") from exc
        n = int(np.prod(shape)) if ndim else 1
        if len(raw) - pos < 4 * n:
            raise CheckpointError(f"{path}: tensor {name} payload truncated")
        vals = np.frombuffer(raw[pos:pos + 4 * n], dtype="<f4")
        pos += 4 * n
        tensors[name] = vals.reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")

    cfg = DenoiserConfig.from_dict(header["config"])
    model = Denoiser(cfg, np.random.default_rng(0))
    for name, p in model.named_params():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name} shape {tensors[name].shape} != {p.shape}")
        p.v = np.ascontiguousarray(tensors[name])
    return model, header
