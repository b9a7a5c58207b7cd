"""Binary PPM (P6) and PGM (P5) read/write, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM needs HxWx3 uint8, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"PGM needs HxW uint8, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"unsupported PNM header {magic!r} maxval {maxval!r}")
    w, h = int(w), int(h)
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raw = data[offset:offset + n]
    if len(raw) != n:
        raise ValueError("truncated PNM data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def write_pgm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())
