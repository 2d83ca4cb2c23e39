"""Iterative magnitude pruning with global or per-layer thresholds, plus one-shot.

Only conv and linear weights take part. Within a pool, weights are ranked
by the key ``(|weight|, layer index, flat index)`` so ties break
deterministically and the number of pruned weights is exact.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .models import Model, ParamStore, param_census
from .snapshot import save_checkpoint
from .training import NonFiniteLossError, TrainConfig, evaluate, train_cycle

log = logging.getLogger(__name__)

MODES = ("imp_global", "imp_local", "one_shot_global", "one_shot_local")
REWIND = ("none", "to_init")


class PruneError(RuntimeError):
    """Internal consistency failure in a mask update."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PruneSchedule:
    mode: str = "imp_global"
    rounds: int = 8
    fraction: float = 0.2
    explicit_targets: tuple[float, ...] | None = None
    rewind: str = "none"
    epochs_per_round: int = 50
    early_stop_patience: int = 10
    target_sparsity: float = 0.8  # one-shot modes only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pruning mode {self.mode!r}; choose from {MODES}")
        if self.rewind not in REWIND:
            raise ValueError(f"unknown rewind {self.rewind!r}; choose from {REWIND}")
        if not 0 < self.fraction < 1:
            raise ValueError(f"per-round fraction must lie in (0, 1), got {self.fraction}")
        if self.explicit_targets:
            t = tuple(float(x) for x in self.explicit_targets)
            if any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0 or t[-1] > 0.99:
                raise ValueError(f"explicit targets must be strictly increasing in (0, 0.99]: {t}")
            self.explicit_targets = t
            self.rounds = len(t)
        if self.mode.startswith("one_shot"):
            if not 0 < self.target_sparsity < 1:
                raise ValueError(f"one-shot target must lie in (0, 1), got {self.target_sparsity}")
            self.rounds = 1
        if self.rounds < 1:
            raise ValueError("need at least one pruning round")

    @property
    def criterion(self) -> str:
        return self.mode.rsplit("_", 1)[1]

    @property
    def iterative(self) -> bool:
        return self.mode.startswith("imp")

    def targets(self) -> list[float]:
        """Cumulative sparsity after each round."""
        if self.mode.startswith("one_shot"):
            return [self.target_sparsity]
        if self.explicit_targets:
            return list(self.explicit_targets)
        return [1.0 - (1.0 - self.fraction) ** j for j in range(1, self.rounds + 1)]


@dataclass
class PruneSet:
    indices: dict[str, np.ndarray]  # layer -> flat indices to prune
    threshold: float | dict[str, float] | None
    warnings: list[str] = field(default_factory=list)

    def count(self) -> int:
        return int(sum(len(v) for v in self.indices.values()))


@dataclass
class RoundRecord:
    round: int
    sparsity: float
    threshold: float | dict[str, float] | None
    accuracy: float
    epochs: int
    checkpoint: str = ""
    status: str = "ok"

    def threshold_str(self) -> str:
        if self.threshold is None:
            return ""
        if isinstance(self.threshold, dict):
            return ";".join(f"{k}={v!r}" for k, v in self.threshold.items())
        return repr(float(self.threshold))


def _unpruned(store: ParamStore):
    for li, (name, p) in enumerate(store.prunable()):
        flat_mask = p.mask.reshape(-1)
        idx = np.flatnonzero(flat_mask)
        yield li, name, idx, np.abs(p.data.reshape(-1)[idx])


def global_threshold(store: ParamStore, fraction: float | None = None, count: int | None = None) -> PruneSet:
    """Prune the ``k`` smallest unpruned weights pooled over every layer.

    ``k = round(fraction * unpruned)`` unless ``count`` is given. The
    threshold is the largest pruned magnitude.
    """
    pools = list(_unpruned(store))
    mags = np.concatenate([m for *_, m in pools]) if pools else np.zeros(0)
    layer = np.concatenate([np.full(len(i), li) for li, _, i, _ in pools]) if pools else np.zeros(0, int)
    flat = np.concatenate([i for _, _, i, _ in pools]) if pools else np.zeros(0, int)
    if count is None:
        if not 0 < fraction < 1:
            raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
        count = round_half_up(fraction * len(mags))
    count = int(min(max(count, 0), len(mags)))
    order = np.lexsort((flat, layer, mags))[:count]
    names = [name for _, name, _, _ in pools]
    out = {n: np.sort(flat[order][layer[order] == li]) for li, n in enumerate(names)}
    cut = float(mags[order[-1]]) if count else None
    warnings = []
    for li, n, idx, _ in pools:
        if len(idx) and len(out[n]) == len(idx):
            warnings.append(f"global pruning empties layer {n}")
    for w in warnings:
        log.warning(w)
    return PruneSet(out, cut, warnings)


def local_thresholds(
    store: ParamStore, fraction: float | None = None, counts: dict[str, int] | None = None
) -> PruneSet:
    """Prune each layer independently: ``round(fraction * unpruned_l)`` weights per layer."""
    out, cuts, warnings = {}, {}, []
    for _, name, idx, mags in _unpruned(store):
        if len(idx) < 2:
            warnings.append(f"layer {name} has {len(idx)} unpruned weights; skipped")
            out[name] = np.zeros(0, dtype=np.int64)
            continue
        if counts is not None:
            k = counts.get(name, 0)
        else:
            if not 0 < fraction < 1:
                raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
            k = round_half_up(fraction * len(idx))
        k = int(min(max(k, 0), len(idx)))
        order = np.lexsort((idx, mags))[:k]
        out[name] = np.sort(idx[order])
        if k:
            cuts[name] = float(mags[order[-1]])
    for w in warnings:
        log.warning(w)
    return PruneSet(out, cuts, warnings)


def round_counts(store: ParamStore, target: float, criterion: str):
    """Per-round prune counts that land cumulative sparsity on ``target``.

    Global: one count so that ``round(N * (1 - target))`` weights survive.
    Local: the same survivor total split across layers by largest remainder,
    so each layer sits within one weight of ``target`` and the network-wide
    sparsity is still exact to ``1 / N``.
    """
    census = param_census(store)
    keep_total = round_half_up(census.total * (1.0 - target))
    if criterion == "global":
        return max(census.unpruned - keep_total, 0)
    shares = np.array([t * (1.0 - target) for _, t, _ in census.layers])
    keep = np.floor(shares).astype(np.int64)
    rem = keep_total - int(keep.sum())
    if rem > 0:
        # stable: larger fractional part first, then layer order
        order = np.lexsort((np.arange(len(shares)), -(shares - keep)))[:rem]
        keep[order] += 1
    return {n: max(u - int(k), 0) for (n, _, u), k in zip(census.layers, keep)}


def compute_prune_set(store: ParamStore, target: float, criterion: str) -> PruneSet:
    counts = round_counts(store, target, criterion)
    if criterion == "global":
        return global_threshold(store, count=counts)
    return local_thresholds(store, counts=counts)


def apply_mask_update(store: ParamStore, prune_set: PruneSet) -> None:
    """Zero the mask at every index in ``prune_set`` and multiply the weights by the new mask."""
    for name, idx in prune_set.indices.items():
        if not len(idx):
            continue
        p = store[name]
        flat_mask = p.mask.reshape(-1)
        if not flat_mask[idx].all():
            raise PruneError(f"attempt to prune already-pruned weights in {name}")
        flat_mask[idx] = False
    for _, p in store.prunable():
        p.data[...] *= p.mask


def rewind(model: Model) -> None:
    """Reset weights to initial weights * mask and batch-norm buffers to their initial values."""
    for _, p in model.store.items():
        p.data[...] = p.init
        if p.mask is not None:
            p.data[...] *= p.mask
    model.reset_buffers()


def _checkpoint(model, checkpoint_dir, tag) -> str:
    if checkpoint_dir is None:
        return ""
    os.makedirs(checkpoint_dir, exist_ok=True)
    path = Path(checkpoint_dir) / f"{tag}.wtck"
    save_checkpoint(path, model)
    return str(path)


def _train_eval(model, train_set, test_set, cfg, seed, offset):
    res = train_cycle(model, train_set, cfg, seed, epoch_offset=offset)
    return evaluate(model, test_set), res.epochs


RoundHook = Callable[[RoundRecord, Model], None]


def imp_run(
    model: Model,
    train_set,
    test_set,
    schedule: PruneSchedule,
    seed: int,
    train_cfg: TrainConfig | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    tag: str = "run",
    on_round: RoundHook | None = None,
) -> list[RoundRecord]:
    """Train, threshold, mask, (rewind), retrain - once per scheduled round.

    Returns the dense round-0 record followed by one record per round; each
    round's accuracy is measured after retraining at that round's sparsity.
    """
    if not schedule.iterative:
        raise ValueError(f"imp_run needs an iterative mode, got {schedule.mode}")
    cfg = _cycle_cfg(train_cfg, schedule)
    records = []

    def emit(rec):
        records.append(rec)
        if on_round is not None:
            on_round(rec, model)

    try:
        acc, ep = _train_eval(model, train_set, test_set, cfg, seed, 0)
    except NonFiniteLossError as exc:
        emit(RoundRecord(0, 0.0, None, float("nan"), 0, status=f"aborted: {exc}"))
        return records
    emit(RoundRecord(0, 0.0, None, acc, ep, _checkpoint(model, checkpoint_dir, f"{tag}_r0")))
    for j, target in enumerate(schedule.targets(), start=1):
        ps = compute_prune_set(model.store, target, schedule.criterion)
        apply_mask_update(model.store, ps)
        if schedule.rewind == "to_init":
            rewind(model)
        sparsity = param_census(model).sparsity
        try:
            acc, ep = _train_eval(model, train_set, test_set, cfg, seed, 1000 * j)
        except NonFiniteLossError as exc:
            emit(RoundRecord(j, sparsity, ps.threshold, float("nan"), 0, status=f"aborted: {exc}"))
            break
        emit(RoundRecord(j, sparsity, ps.threshold, acc, ep, _checkpoint(model, checkpoint_dir, f"{tag}_r{j}")))
        log.info("round %d sparsity %.4f accuracy %.4f", j, sparsity, acc)
    return records


def one_shot_prune(
    model: Model,
    train_set,
    test_set,
    target_sparsity: float,
    criterion: str = "global",
    seed: int = 0,
    train_cfg: TrainConfig | None = None,
    schedule: PruneSchedule | None = None,
    checkpoint_dir=None,
    tag: str = "run",
    on_round: RoundHook | None = None,
    dense: RoundRecord | None = None,
) -> tuple[RoundRecord, RoundRecord]:
    """One training cycle, a single mask update to ``target_sparsity``, one fine-tune cycle.

    Pass ``dense`` when ``model`` already holds the result of that first cycle
    (for instance a clone taken at IMP round 0); it is then reused as-is.
    """
    if not 0 < target_sparsity < 1:
        raise ValueError(f"target sparsity must lie in (0, 1), got {target_sparsity}")
    if criterion not in ("global", "local"):
        raise ValueError(f"criterion must be 'global' or 'local', got {criterion!r}")
    if schedule is None:
        base = train_cfg or TrainConfig()
        schedule = PruneSchedule(
            mode=f"one_shot_{criterion}",
            target_sparsity=target_sparsity,
            epochs_per_round=base.epochs,
            early_stop_patience=base.patience,
        )
    cfg = _cycle_cfg(train_cfg, schedule)
    if dense is None:
        acc, ep = _train_eval(model, train_set, test_set, cfg, seed, 0)
        dense = RoundRecord(0, 0.0, None, acc, ep, _checkpoint(model, checkpoint_dir, f"{tag}_r0"))
    if on_round:
        on_round(dense, model)
    ps = compute_prune_set(model.store, target_sparsity, criterion)
    apply_mask_update(model.store, ps)
    if schedule.rewind == "to_init":
        rewind(model)
    sparsity = param_census(model).sparsity
    try:
        acc, ep = _train_eval(model, train_set, test_set, cfg, seed, 1000)
        pruned = RoundRecord(1, sparsity, ps.threshold, acc, ep, _checkpoint(model, checkpoint_dir, f"{tag}_r1"))
    except NonFiniteLossError as exc:
        pruned = RoundRecord(1, sparsity, ps.threshold, float("nan"), 0, status=f"aborted: {exc}")
    if on_round:
        on_round(pruned, model)
    return dense, pruned


def _cycle_cfg(train_cfg: TrainConfig | None, schedule: PruneSchedule) -> TrainConfig:
    base = train_cfg or TrainConfig()
    return TrainConfig(
        lr=base.lr,
        batch_size=base.batch_size,
        epochs=schedule.epochs_per_round,
        patience=schedule.early_stop_patience,
        val_fraction=base.val_fraction,
    )


def nearest_records(records: list[RoundRecord], targets=(0.6, 0.8)) -> dict[float, RoundRecord]:
    """The records closest to each target sparsity, labelled by their true sparsity."""
    valid = [r for r in records if r.status == "ok"]
    return {t: min(valid, key=lambda r: (abs(r.sparsity - t), r.round)) for t in targets}
