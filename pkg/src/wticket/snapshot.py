"""Binary tensor snapshots (``WTNS``), bit-packed masks (``WTMK``) and checkpoints.

All integers and floats are little-endian.

``WTNS``: magic, u32 version, u32 tensor count, then per tensor a u16 name
length, UTF-8 name, u8 rank, ``rank`` u32 extents and the raw f32 data.

``WTMK``: magic, u32 version, u32 layer count, then per layer a u16 name
length, UTF-8 name, u32 bit count and ``ceil(bits / 8)`` bytes holding one
bit per weight in row-major order, least significant bit first.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"WTNS"
MASK_MAGIC = b"WTMK"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(b)})")
    return b


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def write_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<H", len(b)))
    fh.write(b)


def read_str(fh: BinaryIO) -> str:
    (n,) = _unpack(fh, "<H")
    try:
        return _read_exact(fh, n).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("name is not valid UTF-8") from None


def write_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        write_str(fh, name)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensors(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor-snapshot magic {magic!r}")
    version, count = _unpack(fh, "<II")
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    out = OrderedDict()
    for _ in range(count):
        name = read_str(fh)
        (rank,) = _unpack(fh, "<B")
        shape = _unpack(fh, f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").astype(np.float32)
        out[name] = data.reshape(shape)
    return out


def write_masks(fh: BinaryIO, masks: dict[str, np.ndarray]) -> None:
    fh.write(MASK_MAGIC)
    fh.write(struct.pack("<II", VERSION, len(masks)))
    for name, m in masks.items():
        bits = np.asarray(m, dtype=bool).reshape(-1)
        write_str(fh, name)
        fh.write(struct.pack("<I", bits.size))
        fh.write(np.packbits(bits, bitorder="little").tobytes())


def read_masks(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    """Masks come back flat; callers reshape against the parameter store."""
    magic = fh.read(4)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad mask-section magic {magic!r}")
    version, count = _unpack(fh, "<II")
    if version != VERSION:
        raise FormatError(f"unsupported mask version {version}")
    out = OrderedDict()
    for _ in range(count):
        name = read_str(fh)
        (nbits,) = _unpack(fh, "<I")
        raw = np.frombuffer(_read_exact(fh, (nbits + 7) // 8), dtype=np.uint8)
        out[name] = np.unpackbits(raw, count=nbits, bitorder="little").astype(bool)
    return out


def shape_masks(store, flat: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    names = [n for n, _ in store.prunable()]
    if list(flat) != names:
        raise FormatError(f"mask layers {list(flat)} do not match parameter layout {names}")
    out = {}
    for n, p in store.prunable():
        if flat[n].size != p.data.size:
            raise FormatError(f"mask for {n} has {flat[n].size} bits, weight has {p.data.size}")
        out[n] = flat[n].reshape(p.data.shape)
    return out


# ---------------------------------------------------------------------------
# checkpoints: parameters + batch-norm buffers, then masks
# ---------------------------------------------------------------------------


def save_checkpoint(path, model) -> None:
    tensors = OrderedDict((n, p.data) for n, p in model.store.items())
    tensors.update((f"buffer:{k}", v) for k, v in model.buffers.items())
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    write_masks(buf, model.store.masks())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, model) -> None:
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
        masks = read_masks(fh)
    params = {k: v for k, v in tensors.items() if not k.startswith("buffer:")}
    if list(params) != list(model.store):
        raise FormatError(f"{path}: parameter names do not match {model.arch_id}")
    model.store.load_state(params)
    model.store.set_masks(shape_masks(model.store, masks))
    for k in model.buffers:
        model.buffers[k][...] = tensors[f"buffer:{k}"]
