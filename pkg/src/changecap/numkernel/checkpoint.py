"""Checkpoint files: plain-text manifest header followed by little-endian f64 blobs.

Layout::

    changecap-checkpoint 1
    meta <json>
    param <name> <d0,d1,...> <byte offset>
    ...
    end
    <raw little-endian float64 data>

Offsets are relative to the first byte after the ``end`` line.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "changecap-checkpoint 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray, insertion ordered) and JSON ``meta`` atomically."""
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        a = np.array(arr, dtype="<f8", order="C")
        shape = ",".join(str(d) for d in a.shape)
        lines.append(f"param {name} {shape} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(arrays, meta)`` as written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    header = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: not a changecap checkpoint")
    meta = {}
    arrays = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            name, shape, offset = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            count = int(np.prod(dims)) if dims else 1
            start = pos + int(offset)
            if start + 8 * count > len(raw):
                raise CheckpointError(f"{path}: data for {name} is truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                         offset=start).reshape(dims).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    return arrays, meta
