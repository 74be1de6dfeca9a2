"""Single-file checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"CAPSTRFC"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header (sorted keys, compact separators)
    offset 20+H          payload: raw float64 ('<f8') buffers, back to back

The header lists every buffer as ``{"name", "group", "shape", "offset"}``
with ``offset`` relative to the payload start, and records the payload
length and its SHA-256. Groups are ``param``, ``adam_m`` and ``adam_v``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import ScalingStats
from .errors import CheckpointError, GeometryError
from .layers import AdamState
from .models import Checkpoint, ModelSpec
from .tasks import TaskSpec

MAGIC = b"CAPSTRFC"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _encode(ckpt: Checkpoint) -> bytes:
    entries, chunks = [], []
    offset = 0
    groups = (("param", ckpt.params), ("adam_m", ckpt.optimizer.m), ("adam_v", ckpt.optimizer.v))
    for group, arrays in groups:
        for name in sorted(arrays):
            buf = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
            entries.append({"name": name, "group": group, "shape": list(np.shape(arrays[name])),
                            "offset": offset})
            chunks.append(buf)
            offset += len(buf)
    payload = b"".join(chunks)
    opt = ckpt.optimizer
    header = {
        "model_spec": ckpt.model_spec.to_dict(),
        "task": ckpt.task.to_dict(),
        "optimizer": {"lr0": opt.lr0, "decay": opt.decay, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
        "step": opt.t,
        "stats": None if ckpt.stats is None else ckpt.stats.to_dict(),
        "seed": ckpt.seed,
        "meta": ckpt.meta,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_task: TaskSpec | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[start:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    try:
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            array = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
            groups[entry["group"]][entry["name"]] = array.astype(np.float64).reshape(entry["shape"])
        opt = header["optimizer"]
        optimizer = AdamState(lr0=opt["lr0"], decay=opt["decay"], beta1=opt["beta1"],
                              beta2=opt["beta2"], eps=opt["eps"], t=opt["t"],
                              m=groups["adam_m"], v=groups["adam_v"])
        stats = None if header["stats"] is None else ScalingStats(**header["stats"])
        ckpt = Checkpoint(
            model_spec=ModelSpec.from_dict(header["model_spec"]),
            task=TaskSpec.from_dict(header["task"]),
            params=groups["param"],
            optimizer=optimizer,
            stats=stats,
            seed=header["seed"],
            meta=header.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint contents: {exc}") from exc
    if expect_task is not None and not ckpt.task.same_geometry(expect_task):
        raise GeometryError(
            f"checkpoint was trained for L={ckpt.task.L}, M={ckpt.task.M}, N={ckpt.task.N}; "
            f"data requires L={expect_task.L}, M={expect_task.M}, N={expect_task.N}"
        )
    return ckpt
