"""Binary checkpoint container.

Layout on disk::

    b"FSLCKPT" + version byte
    uint32 LE   header length
    header      UTF-8 JSON (layout, round, role, free-form metadata)
    payload     little-endian float64 values, segment by segment
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .params import Layout, ParamVector

MAGIC = b"FSLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, round=0, role="student", meta=None):
    header = {
        "version": VERSION,
        "layout": params.layout.to_json(),
        "round": int(round),
        "role": role,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.values.astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def load_checkpoint(path):
    """Return ``(params, header)``."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = data[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = len(MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    layout = Layout.from_json(header["layout"])
    values = np.frombuffer(data[pos:], dtype="<f8")
    if values.size != layout.size:
        raise CheckpointError(f"{path}: payload has {values.size} values, layout expects {layout.size}")
    return ParamVector(values.astype(np.float64), layout), header
