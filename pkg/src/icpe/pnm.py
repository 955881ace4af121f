"""Binary PPM (P6) and PGM (P5) with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError(f"PGM needs uint8 [H, W], got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def _parse(blob: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if blob[:2] != magic:
        raise ValueError(f"expected {magic!r} netpbm header, got {blob[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    return w, h, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, _, off = _parse(blob, b"P6")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, _, off = _parse(blob, b"P5")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()
