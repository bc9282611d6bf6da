"""Binary checkpoint container.

Layout (little-endian)::

    b"LIDC" | version u32 | config_len u32 | config (UTF-8 JSON)
    then per tensor: name_len u32 | name | rank u32 | dims u32 * rank | float32 data

The JSON block carries the encoder config, label inventory, training
metadata and the tensor count, so truncation at a tensor boundary is caught.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"LIDC"
VERSION = 1
PROTOTYPE_KEY = "head.prototypes"


@dataclass
class Checkpoint:
    encoder_cfg: EncoderConfig
    params: dict[str, np.ndarray]
    prototypes: np.ndarray
    labels: list[str]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.encoder_cfg,
            {k: v.copy() for k, v in self.params.items()},
            self.prototypes.copy(),
            list(self.labels),
            json.loads(json.dumps(self.meta)),
            self.version,
        )


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    tensors = dict(ckpt.params)
    tensors[PROTOTYPE_KEY] = ckpt.prototypes
    config = {
        "encoder": ckpt.encoder_cfg.to_dict(),
        "labels": list(ckpt.labels),
        "meta": ckpt.meta,
        "n_tensors": len(tensors),
    }
    block = json.dumps(config, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", ckpt.version, len(block)), block]
    out += [_tensor_bytes(name, arr) for name, arr in tensors.items()]
    return b"".join(out)


def loads(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpoint("missing LIDC magic")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    pos = 12
    try:
        if pos + n > len(data):
            raise CorruptCheckpoint("config block truncated")
        config = json.loads(data[pos : pos + n].decode("utf-8"))
        pos += n
        tensors = {}
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + size > len(data):
                raise CorruptCheckpoint(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
        if len(tensors) != config["n_tensors"] or PROTOTYPE_KEY not in tensors:
            raise CorruptCheckpoint(f"expected {config['n_tensors']} tensors, found {len(tensors)}")
        prototypes = tensors.pop(PROTOTYPE_KEY)
        return Checkpoint(
            EncoderConfig.from_dict(config["encoder"]),
            tensors,
            prototypes,
            config["labels"],
            config["meta"],
            version,
        )
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from exc


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
