"""Binary checkpoint format.

Layout: magic b"BLNK", format version (u16 LE), then per parameter:
name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
float32 LE payload. Parameters are stored as "<node>/<key>" and read until
EOF. Payloads are float32 regardless of compute precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .engine import ParameterSet
from .errors import CheckpointError

MAGIC = b"BLNK"
VERSION = 1


def save_checkpoint(params: ParameterSet, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        for nid, group in params.items():
            for key, arr in group.items():
                name = f"{nid}/{key}".encode("utf-8")
                a = np.ascontiguousarray(arr, dtype="<f4")
                f.write(struct.pack("<I", len(name)))
                f.write(name)
                f.write(struct.pack("<I", a.ndim))
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
                f.write(a.tobytes())


def load_checkpoint(path, dtype=np.float64) -> ParameterSet:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    params: ParameterSet = {}
    off = 6
    while off < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated at byte {off}: {e}") from e
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {off}")
        nid, _, key = name.rpartition("/")
        if not nid:
            raise CheckpointError(f"{path}: malformed parameter name {name!r}")
        params.setdefault(nid, {})[key] = arr.reshape(dims).astype(dtype)
    return params
