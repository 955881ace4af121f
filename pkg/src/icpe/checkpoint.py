"""Binary checkpoint format for a :class:`ParamRegistry`.

Layout (all integers little-endian uint32)::

    b"ICPECKPT" version count
    repeated count times:
        name_len name_bytes rank dim_0 .. dim_{rank-1} float64-LE payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import ParamRegistry

MAGIC = b"ICPECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _parse(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an ICPE checkpoint")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        state[name] = arr.reshape(dims)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes")
    return state


def save_checkpoint(params: ParamRegistry | dict, path) -> None:
    state = params.state() if isinstance(params, ParamRegistry) else params
    Path(path).write_bytes(dumps(state))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
