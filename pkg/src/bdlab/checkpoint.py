"""Binary checkpoint container.

Layout::

    b"BDLAB1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (sorted keys) with schedule kind, T, model config,
            adapter spec (or null), metadata and the array manifest
            [[name, shape], ...]
    arrays: little-endian float64, C order, in manifest order

Writes go through a temporary file and ``os.replace`` so a reader never sees
a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .adapters import AdapterSpec, apply_placement
from .diffusion import NoiseSchedule, make_schedule
from .model import DenoiserModel, ModelConfig

MAGIC = b"BDLAB1\n"


class CheckpointError(ValueError):
    pass


def _header(model: DenoiserModel, sched: NoiseSchedule, meta: dict | None) -> dict:
    spec = model.adapter_spec
    return {
        "schedule": {"kind": sched.kind, "T": int(sched.T)},
        "model": model.config.to_dict(),
        "adapter": spec.to_dict() if spec is not None else None,
        "arrays": [[name, list(arr.shape)] for name, arr in model.state()],
        "meta": meta or {},
    }


def to_bytes(model: DenoiserModel, sched: NoiseSchedule, meta: dict | None = None) -> bytes:
    head = json.dumps(_header(model, sched, meta), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    for _, arr in model.state():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: DenoiserModel, sched: NoiseSchedule, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, sched, meta))
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        return _read_header(fh.read(len(MAGIC) + 8), fh)


def _read_header(prefix: bytes, fh) -> dict:
    if prefix[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a bdlab checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", prefix[len(MAGIC) :])
    return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    """Rebuild the model, its schedule and the stored metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open("rb") as fh:
        head = _read_header(fh.read(len(MAGIC) + 8), fh)
        blob = fh.read()
    sched = make_schedule(head["schedule"]["T"], head["schedule"]["kind"])
    model = DenoiserModel.build(ModelConfig(**head["model"]))
    if head["adapter"] is not None:
        model, _ = apply_placement(model, AdapterSpec.from_dict(head["adapter"]))
    expected = [[name, list(arr.shape)] for name, arr in model.state()]
    if expected != head["arrays"]:
        raise CheckpointError("array manifest does not match the rebuilt model")
    snap, offset = {}, 0
    for name, shape in head["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {name}")
        snap[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError("trailing bytes after the last array")
    model.restore(snap)
    return model, sched, head["meta"]
