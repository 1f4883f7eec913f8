"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    b"XMCKPT\\0\\1"           8 bytes
    version  u16
    hash     64 ascii hex chars      sha256 of the architecture config JSON
    u32 n + config JSON              utf-8, sorted keys
    u32 n + state JSON               epoch, best_val, lr
    u32 blob count
    per blob: u16 n + name | u8 ndim | ndim x u32 shape | float64 LE data
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_hash
from .errors import CheckpointError

MAGIC = b"XMCKPT\x00\x01"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def arch(self) -> dict:
        return self.config.get("arch", {})

    @property
    def config_hash(self) -> str:
        return config_hash(self.arch)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    state = json.dumps(ckpt.state, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<H", ckpt.version), ckpt.config_hash.encode("ascii")]
    out += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state)), state]
    out.append(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype=np.float64)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC) + 2 + 64 + 4:
        raise CheckpointError("checkpoint is truncated")
    r = _Reader(blob[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    stored_hash = r.take(64).decode("ascii")
    config = json.loads(r.take(r.unpack("<I")[0]))
    state = json.loads(r.take(r.unpack("<I")[0]))
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")[0]).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.off != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    ckpt = Checkpoint(config, params, state, version)
    if ckpt.config_hash != stored_hash:
        raise CheckpointError("stored config hash does not match the embedded config")
    if expected_hash is not None and stored_hash != expected_hash:
        raise CheckpointError(
            f"checkpoint was built for config {stored_hash[:12]}, expected {expected_hash[:12]}"
        )
    return ckpt


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(blob, expected_hash)
