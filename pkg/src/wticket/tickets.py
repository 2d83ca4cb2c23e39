"""Winning-ticket files and cross-dataset transfer.

Ticket layout (little-endian)::

    b"WTKT" | u32 version | u16 len + arch id | u64 seed | f32 sparsity
    | WTNS section: initial weights for every parameter
    | WTMK section: final mask
    | u16 len + source-dataset fingerprint (hex SHA-256 of its manifest)
    | u8 has_trained | [WTNS section: trained weights]
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .models import build_model, param_census
from .snapshot import (
    FormatError,
    read_masks,
    read_str,
    read_tensors,
    shape_masks,
    write_masks,
    write_str,
    write_tensors,
)
from .training import TrainConfig, evaluate, train_cycle

TICKET_MAGIC = b"WTKT"
TICKET_VERSION = 1


@dataclass
class Ticket:
    arch_id: str
    seed: int
    init: "OrderedDict[str, np.ndarray]"
    masks: "OrderedDict[str, np.ndarray]"  # flat bool per prunable layer
    sparsity: float
    fingerprint: str = ""
    trained: "OrderedDict[str, np.ndarray] | None" = None

    def recomputed_sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        kept = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - kept / total


def ticket_from_model(model, fingerprint: str = "", include_trained: bool = False) -> Ticket:
    store = model.store
    return Ticket(
        model.arch_id,
        int(model.seed),
        OrderedDict((n, p.init.copy()) for n, p in store.items()),
        OrderedDict((n, p.mask.reshape(-1).copy()) for n, p in store.prunable()),
        param_census(model).sparsity,
        fingerprint,
        OrderedDict((n, p.data.copy()) for n, p in store.items()) if include_trained else None,
    )


def encode_ticket(t: Ticket) -> bytes:
    buf = io.BytesIO()
    buf.write(TICKET_MAGIC)
    buf.write(struct.pack("<I", TICKET_VERSION))
    write_str(buf, t.arch_id)
    buf.write(struct.pack("<Qf", t.seed, t.sparsity))
    write_tensors(buf, t.init)
    write_masks(buf, t.masks)
    write_str(buf, t.fingerprint)
    buf.write(struct.pack("<B", t.trained is not None))
    if t.trained is not None:
        write_tensors(buf, t.trained)
    return buf.getvalue()


def decode_ticket(data: bytes) -> Ticket:
    fh = io.BytesIO(data)
    if fh.read(4) != TICKET_MAGIC:
        raise FormatError("not a ticket file (bad magic)")
    try:
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TICKET_VERSION:
            raise FormatError(f"unsupported ticket version {version}")
        arch = read_str(fh)
        seed, sparsity = struct.unpack("<Qf", fh.read(12))
        init = read_tensors(fh)
        masks = read_masks(fh)
        fingerprint = read_str(fh)
        (has_trained,) = struct.unpack("<B", fh.read(1))
        trained = read_tensors(fh) if has_trained else None
    except struct.error as exc:
        raise FormatError(f"truncated ticket: {exc}") from None
    if fh.read(1):
        raise FormatError("trailing bytes after ticket")
    t = Ticket(arch, seed, init, masks, float(sparsity), fingerprint, trained)
    if np.float32(t.recomputed_sparsity()) != np.float32(sparsity):
        raise FormatError(f"header sparsity {sparsity} disagrees with mask ({t.recomputed_sparsity()})")
    return t


def export_ticket(model, path, fingerprint: str = "", include_trained: bool = False) -> Ticket:
    t = ticket_from_model(model, fingerprint, include_trained)
    with open(path, "wb") as fh:
        fh.write(encode_ticket(t))
    # report what a reader will see, including the f32 header rounding
    return decode_ticket(encode_ticket(t))


def import_ticket(path) -> Ticket:
    with open(path, "rb") as fh:
        return decode_ticket(fh.read())


def model_from_ticket(t: Ticket, input_shape, from_trained: bool = False):
    """Rebuild the ticket's network as ``initial weights * mask`` (or trained weights * mask)."""
    try:
        model = build_model(t.arch_id, t.seed, input_shape)
    except ValueError as exc:
        raise ValueError(f"ticket arch {t.arch_id!r} cannot take input {tuple(input_shape)}: {exc}") from None
    store = model.store
    if list(t.init) != list(store):
        raise ValueError(f"ticket parameters do not match {t.arch_id} layout")
    for n, p in store.items():
        if t.init[n].shape != p.data.shape:
            raise ValueError(
                f"ticket tensor {n} has shape {t.init[n].shape}, {t.arch_id} on input "
                f"{tuple(input_shape)} expects {p.data.shape}"
            )
        init = t.init[n].astype(np.float32)
        init.setflags(write=False)
        p.init = init
    weights = t.init
    if from_trained:
        if t.trained is None:
            raise ValueError("ticket carries no trained weights; export with include_trained")
        weights = t.trained
    store.load_state(weights)
    store.set_masks(shape_masks(store, t.masks))
    return model


@dataclass
class TransferResult:
    accuracy: float  # a2'
    sparsity: float  # after training; equals the ticket's
    epochs: int
    model: object = None


def transfer_train(
    t: Ticket, dataset, cfg: TrainConfig | None = None, seed: int = 0, from_trained: bool = False
) -> TransferResult:
    """Train the ticket's sparse network on ``dataset`` with its mask frozen."""
    cfg = cfg or TrainConfig()
    model = model_from_ticket(t, dataset.train.input_shape, from_trained)
    res = train_cycle(model, dataset.train, cfg, seed)
    acc = evaluate(model, dataset.test)
    return TransferResult(acc, param_census(model).sparsity, res.epochs, model)


def dense_baseline(t: Ticket, dataset, cfg: TrainConfig | None = None, seed: int = 0) -> float:
    """a2: the same initialization trained densely on ``dataset``."""
    cfg = cfg or TrainConfig()
    model = model_from_ticket(t, dataset.train.input_shape)
    model.store.set_masks({n: np.ones(p.data.shape, bool) for n, p in model.store.prunable()})
    model.store.load_state(t.init)
    train_cycle(model, dataset.train, cfg, seed)
    return evaluate(model, dataset.test)


@dataclass
class TransferRecord:
    delta: float
    retention: float
    params_remaining: int | None


def transfer_report(a2_prime: float, a2: float, ticket: Ticket | None = None) -> TransferRecord:
    for name, v in (("a2'", a2_prime), ("a2", a2)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} = {v} is not an accuracy in [0, 1]")
    if a2 == 0:
        raise ZeroDivisionError("dense accuracy a2 is zero; retention undefined")
    params = None
    if ticket is not None:
        kept = sum(int(m.sum()) for m in ticket.masks.values())
        other = sum(v.size for n, v in ticket.init.items() if n not in ticket.masks)
        params = kept + other
    return TransferRecord(a2_prime - a2, a2_prime / a2, params)
