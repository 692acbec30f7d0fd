"""Binary checkpoints of generator/discriminator stacks.

Layout (little-endian)::

    b"GSCA" | u32 version | u64 body length | body

    body: 32-byte config hash | u32 stage | u32 epoch
          | u32 n + n bytes RNG state (canonical JSON, empty if absent)
          | u32 n + n bytes architecture (canonical JSON)
          | u32 parameter count | parameter records

    record: u16 n + name | u8 ndim | u32 dims[ndim] | u64 Adam step
            | f64 value[] | f64 first moment[] | f64 second moment[]
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import atomic_write
from .model import DiscriminatorStack, GeneratorStack

MAGIC = b"GSCA"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    generator: GeneratorStack
    discriminator: Optional[DiscriminatorStack] = None
    stage: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    config_hash: bytes = bytes(32)


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _named_parameters(ckpt: Checkpoint):
    out = [(f"G.{i}", p) for i, p in enumerate(ckpt.generator.parameters())]
    if ckpt.discriminator is not None:
        out += [(f"D.{i}", p) for i, p in enumerate(ckpt.discriminator.parameters())]
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    arch = {"generator": ckpt.generator.to_config(),
            "discriminator": ckpt.discriminator.to_config() if ckpt.discriminator is not None else None}
    rng = _canonical(ckpt.rng_state) if ckpt.rng_state is not None else b""
    arch_bytes = _canonical(arch)
    params = _named_parameters(ckpt)
    parts = [ckpt.config_hash, struct.pack("<II", ckpt.stage, ckpt.epoch),
             struct.pack("<I", len(rng)), rng, struct.pack("<I", len(arch_bytes)), arch_bytes,
             struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", p.value.ndim),
                  struct.pack(f"<{p.value.ndim}I", *p.value.shape), struct.pack("<Q", p.step)]
        for arr in (p.value, p.m, p.v):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return MAGIC + struct.pack("<IQ", VERSION, len(body)) + body


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise CheckpointError(f"truncated checkpoint header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}, expected {MAGIC!r}")
    version, body_len = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(data) != 16 + body_len:
        raise CheckpointError(f"corrupt length: header declares {body_len} body bytes, file holds {len(data) - 16}")
    r = _Reader(data, 16)
    chash = r.take(32)
    stage, epoch = r.unpack("<II")
    (n,) = r.unpack("<I")
    rng_bytes = r.take(n)
    (n,) = r.unpack("<I")
    try:
        arch = json.loads(r.take(n))
        rng_state = json.loads(rng_bytes) if rng_bytes else None
        G = GeneratorStack.from_config(arch["generator"])
        D = DiscriminatorStack.from_config(arch["discriminator"]) if arch["discriminator"] is not None else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt architecture record: {exc}") from exc
    ckpt = Checkpoint(G, D, stage, epoch, rng_state, chash)
    expected = _named_parameters(ckpt)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"architecture has {len(expected)} parameters but file stores {count}")
    for name, p in expected:
        (n,) = r.unpack("<H")
        got = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if got != name or shape != p.value.shape:
            raise CheckpointError(f"parameter {got} {shape} does not match architecture slot {name} {p.value.shape}")
        (p.step,) = r.unpack("<Q")
        size = int(np.prod(shape))
        for arr in (p.value, p.m, p.v):
            arr[...] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes at offset {r.pos}")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
