"""Named-tensor checkpoint files shared by both model families.

Layout (little-endian): magic (4 bytes), u16 version, u32-length-prefixed
UTF-8 config snapshot of ``key=value`` lines, u32 tensor count, then per
tensor a u32-length-prefixed name, u8 rank, u32 dims and float32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

VERSION = 1
PTP_MAGIC = b"PTPC"
AR_MAGIC = b"PTPA"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float32
    config: dict[str, str]
    step: int
    magic: bytes = PTP_MAGIC


def snapshot(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = dict(ckpt.config)
    cfg["step"] = str(ckpt.step)
    cfg_bytes = "".join(f"{k}={v}\n" for k, v in cfg.items()).encode()
    parts = [ckpt.magic, struct.pack("<H", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def from_bytes(data: bytes, magic: bytes | None = None) -> Checkpoint:
    if data[:4] not in (PTP_MAGIC, AR_MAGIC) or (magic is not None and data[:4] != magic):
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    found = data[:4]
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 6
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    config = {}
    for line in data[off : off + clen].decode().splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    off += clen
    step = int(config.pop("step", 0))
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if off + size > len(data):
            raise CheckpointError(f"tensor {name!r} payload overruns file")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(dims).copy()
        off += size
    return Checkpoint(tensors, config, step, found)


def save_checkpoint(model: nn.Module, config: dict[str, str], step: int, path: str | Path, magic: bytes = PTP_MAGIC):
    Path(path).write_bytes(to_bytes(Checkpoint(snapshot(model), config, step, magic)))


def load_checkpoint(path: str | Path, magic: bytes | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), magic)


def load_into(model: nn.Module, ckpt: Checkpoint, skip: tuple[str, ...] = ()) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    state = model.state_dict()
    for name, ref in state.items():
        if name.startswith(skip):
            continue
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        got = ckpt.tensors[name]
        if tuple(got.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(got.shape)} != model shape {tuple(ref.shape)}")
    extra = [n for n in ckpt.tensors if n not in state and not n.startswith(skip)]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    with torch.no_grad():
        for name, ref in state.items():
            if not name.startswith(skip):
                ref.copy_(torch.from_numpy(ckpt.tensors[name]))
