"""Deterministic binary checkpoint container.

Layout::

    CRANERL-CHECKPOINT\\n
    <header length in bytes, decimal>\\n
    <JSON header, sorted keys>\\n
    <float64 little-endian blobs, in header order>

The header records the format version, the configuration echo, scalar
metadata (step counters, curriculum state, RNG states) and, for every
array, its name, shape and byte offset into the blob section. Nothing
time- or platform-dependent is written, so saving a loaded checkpoint
reproduces the original bytes.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CRANERL-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"version": ckpt.version, "config": ckpt.config_text, "meta": ckpt.meta,
              "arrays": entries}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return MAGIC + str(len(text)).encode() + b"\n" + text + b"\n" + b"".join(blobs)


def decode(data: bytes, expected_version: int = FORMAT_VERSION) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic line)")
    pos = len(MAGIC)
    nl = data.find(b"\n", pos)
    try:
        hlen = int(data[pos:nl])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header length") from exc
    start = nl + 1
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    version = header.get("version")
    if version != expected_version:
        raise CheckpointError(f"checkpoint format version {version} is not supported "
                              f"(expected {expected_version})")
    base = start + hlen + 1
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated checkpoint: array {e['name']!r}")
        arr = np.frombuffer(data[lo:hi], dtype="<f8").astype(float).reshape(e["shape"])
        arrays[e["name"]] = arr
    return Checkpoint(header["config"], arrays, header["meta"], version)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
