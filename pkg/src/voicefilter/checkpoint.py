"""Binary checkpoint container shared by all trainable models.

Layout: magic "VFCK", version u32, kind u8, length-prefixed config JSON,
tensor table (count u32; per tensor: u16 name length + UTF-8 name, u8 ndim,
u32 dims, f32 little-endian data), and a trailing 32-byte SHA-256 over all
preceding bytes. Tensor data is always stored as f32, so a save/load round
trip of a standard-precision model is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voicefilter.errors import DataError

MAGIC = b"VFCK"
VERSION = 1

KIND_VF_BACKGROUND = 1
KIND_VF_FINETUNED = 2
KIND_EMBEDDER = 3

KIND_NAMES = {
    KIND_VF_BACKGROUND: "vf-background",
    KIND_VF_FINETUNED: "vf-finetuned",
    KIND_EMBEDDER: "embedder",
}


@dataclass
class Checkpoint:
    kind: int
    config: dict
    tensors: dict[str, np.ndarray]

    @property
    def kind_name(self) -> str:
        return KIND_NAMES.get(self.kind, f"unknown({self.kind})")


def save_checkpoint(
    path: str | Path, kind: int, config: dict, tensors: dict[str, np.ndarray]
) -> None:
    parts = [MAGIC, struct.pack("<IB", VERSION, kind)]
    config_blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(config_blob)))
    parts.append(config_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    payload = b"".join(parts)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"corrupt checkpoint {self.path}: truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < 4 + 5 + 32 or blob[:4] != MAGIC:
        raise DataError(f"corrupt checkpoint {path}: bad magic or size")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise DataError(f"corrupt checkpoint {path}: hash mismatch")
    reader = _Reader(payload, path)
    reader.take(4)  # magic
    version, kind = reader.unpack("<IB")
    if version != VERSION:
        raise DataError(
            f"unsupported checkpoint version {version} in {path} "
            f"(this build reads version {VERSION})"
        )
    (config_len,) = reader.unpack("<I")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: bad config block ({exc})") from None
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        dims = reader.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    return Checkpoint(kind, config, tensors)
