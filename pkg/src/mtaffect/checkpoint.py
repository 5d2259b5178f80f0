"""Flat binary parameter checkpoints.

Layout (all header lines are ASCII, ``\\n``-terminated)::

    MTAFFECT-CHECKPOINT 1
    tensors <count>
    <name> <dtype> <byte-offset> <shape>      # one line per tensor
    end
    <raw little-endian payload>

``dtype`` is ``float32`` or ``float64``; ``shape`` is extents joined by ``x``
(``3x3x1x8``); ``byte-offset`` counts from the first payload byte, which is the
byte right after ``end\\n``. Names may not contain whitespace.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "MTAFFECT-CHECKPOINT 1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    lines = [MAGIC, f"tensors {len(arrays)}"]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        raw = arr.astype(_DTYPES[dtype]).tobytes(order="C")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {dtype} {offset} {shape}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    end = blob.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = blob[:end].decode("ascii").split("\n")
    payload = blob[end + len(b"\nend\n"):]
    if header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {header[0]!r}")
    try:
        count = int(header[1].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError(f"{path}: malformed tensor count line") from None
    entries = header[2:]
    if len(entries) != count:
        raise CheckpointError(f"{path}: header lists {len(entries)} tensors, expected {count}")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(entries, start=3):
        parts = line.split()
        if len(parts) != 4 or parts[1] not in _DTYPES:
            raise CheckpointError(f"{path}:{lineno}: malformed entry {line!r}")
        name, dtype, offset, shape_s = parts
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        start = int(offset)
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}:{lineno}: payload truncated for {name}")
        out[name] = np.frombuffer(payload, dtype=_DTYPES[dtype], count=nbytes // np.dtype(_DTYPES[dtype]).itemsize,
                                  offset=start).reshape(shape).astype(dtype)
    return out
