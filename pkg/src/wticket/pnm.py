"""Binary portable graymap/pixmap (P5/P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    pass


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PnmError(f"pixmap data must be uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PnmError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(img).tobytes()


def write(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out: list[bytes] = []
    i, n = 0, len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise PnmError("truncated header")
        out.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not buf[i : i + 1].isspace():
        raise PnmError("missing whitespace after header")
    return out, i + 1


def decode(buf: bytes) -> np.ndarray:
    if buf[:2] not in (b"P5", b"P6"):
        raise PnmError(f"not a binary PGM/PPM file (magic {buf[:2]!r})")
    toks, start = _tokens(buf, 4)
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError:
        raise PnmError("non-numeric header field") from None
    if w <= 0 or h <= 0:
        raise PnmError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    ch = 3 if toks[0] == b"P6" else 1
    size = w * h * ch
    raster = buf[start : start + size]
    if len(raster) != size or len(buf) != start + size:
        raise PnmError(f"raster size mismatch: expected {size} bytes, file has {len(buf) - start}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
