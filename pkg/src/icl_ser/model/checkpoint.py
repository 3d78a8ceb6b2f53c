"""Single-file checkpoints: a JSON manifest followed by little-endian float64 blobs.

Layout::

    8 bytes   magic  b"ICLSER01"
    8 bytes   manifest length N (uint64, little-endian)
    N bytes   manifest (UTF-8 JSON, sorted keys)
    ...       raw '<f8' data for each tensor, in manifest order

The manifest echoes the model config and lists every tensor's name, shape
and byte offset relative to the start of the data section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ICLSER01"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    stage: str
    step: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    out += [(f"optim/{k}", v) for k, v in ckpt.optimizer.items()]
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "config": ckpt.config,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    body = memoryview(raw)[16 + n:]
    ckpt = Checkpoint(
        config=manifest["config"], stage=manifest["stage"], step=manifest["step"],
        rng_state=manifest["rng_state"], meta=manifest["meta"],
    )
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(body):
            raise CheckpointError(f"tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(body[start:start + 8 * count], dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, name = entry["name"].partition("/")
        (ckpt.params if kind == "param" else ckpt.optimizer)[name] = arr
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
