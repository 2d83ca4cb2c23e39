"""CSV schemas for run outputs and their aggregation into retention tables."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from statistics import median

CURVE_FIELDS = ["run_id", "arch", "mode", "round", "sparsity", "threshold", "accuracy", "epochs", "seed"]
SHIFT_FIELDS = ["run_id", "image_id", "class", "sparsity", "delta_frobenius"]
TRANSFER_FIELDS = [
    "run_id", "arch", "seed", "ticket_sparsity", "a2_prime", "a2", "delta", "retention",
    "params_remaining", "post_sparsity",
]
SENSITIVITY_FIELDS = ["run_id", "seed", "round", "sparsity", "artifact_id", "frequency", "sensitivity", "half_width", "n"]
RETENTION_FIELDS = ["arch", "mode", "round", "sparsity", "accuracy", "dense_accuracy", "retention", "seeds"]
BIAS_FIELDS = ["artifact_id", "frequency", "retention_median", "seeds", "rank_correlation", "correlation_status", "negative_bias"]


class SchemaError(ValueError):
    pass


def retention_ratio(a_sparse: float, a_dense: float) -> float:
    if a_dense == 0:
        raise ZeroDivisionError("dense accuracy is zero; retention undefined")
    if a_dense < 0:
        raise ValueError(f"dense accuracy must be positive, got {a_dense}")
    return a_sparse / a_dense


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: fmt(r[k]) for k in header})


def read_csv(path, header: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise SchemaError(f"{path}: header {reader.fieldnames} does not match expected {header}")
        return list(reader)


def retention_table(curve_rows: list[dict]) -> list[dict]:
    """Per (arch, mode, round): median over seeds, retention against the round-0 median."""
    groups = defaultdict(list)
    for r in curve_rows:
        groups[(r["arch"], r["mode"], int(r["round"]))].append(r)
    out = []
    for (arch, mode, rnd), rows in sorted(groups.items()):
        dense_rows = groups.get((arch, mode, 0))
        if not dense_rows:
            raise SchemaError(f"no round-0 rows for {arch}/{mode}")
        acc = median(float(r["accuracy"]) for r in rows)
        dense = median(float(r["accuracy"]) for r in dense_rows)
        out.append(
            {
                "arch": arch,
                "mode": mode,
                "round": rnd,
                "sparsity": median(float(r["sparsity"]) for r in rows),
                "accuracy": acc,
                "dense_accuracy": dense,
                "retention": retention_ratio(acc, dense) if dense > 0 else math.nan,
                "seeds": len(rows),
            }
        )
    return out


def render_table(rows: list[dict]) -> str:
    lines = [f"{'arch':<12} {'mode':<16} {'round':>5} {'sparsity':>9} {'acc %':>7} {'dense %':>8} {'retention':>9}"]
    for r in rows:
        lines.append(
            f"{r['arch']:<12} {r['mode']:<16} {r['round']:>5} {100 * r['sparsity']:>8.1f}% "
            f"{100 * r['accuracy']:>7.2f} {100 * r['dense_accuracy']:>8.2f} {r['retention']:>9.3f}"
        )
    return "\n".join(lines)
