"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + b"\n" + f"{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _as_u8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise PnmError("pixel values outside 0..255")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


def encode_ppm(rgb) -> bytes:
    rgb = _as_u8(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PnmError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    return _encode(b"P6", rgb)


def encode_pgm(gray) -> bytes:
    gray = _as_u8(gray)
    if gray.ndim != 2:
        raise PnmError(f"PGM needs an (H, W) array, got {gray.shape}")
    return _encode(b"P5", gray)


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("malformed header")
        tokens.append(buf[start:pos])
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PnmError("malformed header")
    return tokens, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into (H, W) or (H, W, 3) uint8."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported format {magic!r}; only binary P5/P6 are read")
    (_, w, h, maxval), pos = _header_tokens(buf, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PnmError("malformed header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise PnmError(f"unsupported dimensions/depth {w}x{h} maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    payload = buf[pos : pos + n]
    if len(payload) < n:
        raise PnmError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape((h, w, 3) if ch == 3 else (h, w))
    return arr.copy()


def write_ppm(path, rgb) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def write_pgm(path, gray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode(fh.read())
    if arr.ndim != 3:
        raise PnmError(f"{path}: expected P6 data")
    return arr


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode(fh.read())
    if arr.ndim != 2:
        raise PnmError(f"{path}: expected P5 data")
    return arr
