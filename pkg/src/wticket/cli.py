"""``wt`` command line: generate | train | prune | transfer | gradcam | report.

Every command reads a flat config file, writes into an output directory
and exits 0 on success. Failures print one line,
``error: <kind>: <message>``, to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import defaultdict
from pathlib import Path
from statistics import median

import numpy as np

from . import report as rp
from .attribution import gradcam, attention_shift, write_overlay
from .config import ExperimentConfig
from .data import artifact_sensitivity, load_dataset, survival_bias_report, synth_generate
from .models import build_model, param_census
from .pruning import imp_run, nearest_records, one_shot_prune
from .snapshot import load_checkpoint, save_checkpoint
from .tickets import dense_baseline, export_ticket, import_ticket, transfer_report, transfer_train
from .training import evaluate, train_cycle

log = logging.getLogger("wticket")

TRAIN_FIELDS = ["run_id", "arch", "seed", "accuracy", "epochs"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def _limit_threads():
    n = os.environ.get("WT_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.digest()[:10]}-s{seed}"


def resolve_data(cfg: ExperimentConfig, out: Path):
    """Load ``cfg.data_dir``, or the synthetic dataset under ``out/data`` (generated on demand)."""
    if cfg.data_dir:
        return load_dataset(cfg.data_dir)
    root = out / "data"
    if not (root / "manifest.csv").is_file():
        synth_generate(cfg.synth(), root)
    return load_dataset(root)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def _write_run(out: Path, cfg, command, runs, started, artifacts):
    missing = [a for a in artifacts if not Path(a).exists()]
    if missing:
        raise RuntimeError(f"declared artifacts missing: {missing}")
    record = {
        "command": command,
        "config_hash": cfg.digest(),
        "runs": runs,
        "wall_clock_s": time.time() - started,
        "artifacts": [str(a) for a in artifacts],
    }
    (out / f"run_{command}.json").write_text(json.dumps(record, indent=2, default=_jsonable))
    (out / "config.txt").write_text(cfg.dumps())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    root = Path(cfg.data_dir) if cfg.data_dir else out / "data"
    synth_generate(cfg.synth(), root)
    print(root)
    return root


def cmd_train(cfg: ExperimentConfig, out: Path) -> Path:
    started = time.time()
    bundle = resolve_data(cfg, out)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    rows, runs, artifacts = [], [], []
    for seed in cfg.seed_list():
        rid = run_id(cfg, seed)
        model = build_model(cfg.arch, seed, bundle.train.input_shape)
        res = train_cycle(model, bundle.train, cfg.train_config(), seed)
        acc = evaluate(model, bundle.test)
        path = ck / f"{rid}_dense.wtck"
        save_checkpoint(path, model)
        artifacts.append(path)
        rows.append({"run_id": rid, "arch": cfg.arch, "seed": seed, "accuracy": acc, "epochs": res.epochs})
        runs.append({"run_id": rid, "seed": seed, "accuracy": acc, "epochs": res.epochs})
    path = out / "train.csv"
    rp.write_csv(path, TRAIN_FIELDS, rows)
    _write_run(out, cfg, "train", runs, started, artifacts + [path])
    return path


def _sensitivity_rows(model, bundle, rid, seed, rec, freqs, rows):
    for aid in sorted(freqs):
        s = artifact_sensitivity(model, bundle.test, aid)
        rows.append(
            {
                "run_id": rid, "seed": seed, "round": rec.round, "sparsity": rec.sparsity,
                "artifact_id": aid, "frequency": freqs[aid], "sensitivity": s.value,
                "half_width": s.half_width, "n": s.n,
            }
        )


def _train_frequencies(bundle, min_samples: int = 30) -> dict[str, float]:
    """Empirical artifact frequencies among training fakes, for artifacts testable on the test split."""
    arts = [a for a in bundle.train.artifacts if a]
    test = bundle.test
    out = {}
    for a in sorted(set(arts)):
        n = sum(1 for i, t in enumerate(test.artifacts) if t == a and test.labels[i] == 1)
        if n < min_samples:
            log.warning("skipping sensitivity for %r: %d test fakes, need %d", a, n, min_samples)
            continue
        out[a] = arts.count(a) / len(arts)
    return out


def cmd_prune(cfg: ExperimentConfig, out: Path) -> Path:
    started = time.time()
    bundle = resolve_data(cfg, out)
    schedule = cfg.schedule()
    ck, tk = out / "checkpoints", out / "tickets"
    tk.mkdir(parents=True, exist_ok=True)
    freqs = _train_frequencies(bundle) if cfg.sensitivity else {}
    curve, sens_rows, runs, artifacts = [], [], [], []
    for seed in cfg.seed_list():
        rid = run_id(cfg, seed)
        model = build_model(cfg.arch, seed, bundle.train.input_shape)

        def hook(rec, m, rid=rid, seed=seed):
            if cfg.sensitivity and rec.status == "ok":
                _sensitivity_rows(m, bundle, rid, seed, rec, freqs, sens_rows)

        if schedule.iterative:
            records = imp_run(
                model, bundle.train, bundle.test, schedule, seed, cfg.train_config(), ck, rid, hook
            )
        else:
            records = list(
                one_shot_prune(
                    model, bundle.train, bundle.test, schedule.target_sparsity, schedule.criterion,
                    seed, cfg.train_config(), schedule, ck, rid, hook,
                )
            )
        for r in records:
            curve.append(
                {
                    "run_id": rid, "arch": cfg.arch, "mode": schedule.mode, "round": r.round,
                    "sparsity": r.sparsity, "threshold": r.threshold_str(), "accuracy": r.accuracy,
                    "epochs": r.epochs, "seed": seed,
                }
            )
            if r.checkpoint:
                artifacts.append(r.checkpoint)
        for target, rec in nearest_records(records).items():
            fresh = build_model(cfg.arch, seed, bundle.train.input_shape)
            load_checkpoint(rec.checkpoint, fresh)
            path = tk / f"{rid}_p{round(100 * target):02d}.wtkt"
            export_ticket(fresh, path, bundle.fingerprint, include_trained=True)
            artifacts.append(path)
        runs.append({"run_id": rid, "seed": seed, "records": [vars(r) for r in records]})
    path = out / "sparsity_curve.csv"
    rp.write_csv(path, rp.CURVE_FIELDS, curve)
    artifacts.append(path)
    if cfg.sensitivity:
        sp = out / "sensitivity.csv"
        rp.write_csv(sp, rp.SENSITIVITY_FIELDS, sens_rows)
        artifacts.append(sp)
    _write_run(out, cfg, "prune", runs, started, artifacts)
    return path


def cmd_transfer(cfg: ExperimentConfig, out: Path) -> Path:
    started = time.time()
    if not cfg.ticket:
        raise ValueError("config key 'ticket' is required for transfer")
    ticket = import_ticket(cfg.ticket)
    bundle = resolve_data(cfg, out)
    rows, runs = [], []
    for seed in cfg.seed_list():
        rid = run_id(cfg, seed)
        res = transfer_train(ticket, bundle, cfg.train_config(), seed, cfg.from_trained)
        a2 = dense_baseline(ticket, bundle, cfg.train_config(), seed) if cfg.transfer_baseline else None
        rec = transfer_report(res.accuracy, a2, ticket) if a2 is not None else None
        row = {
            "run_id": rid, "arch": ticket.arch_id, "seed": seed, "ticket_sparsity": ticket.sparsity,
            "a2_prime": res.accuracy, "a2": a2,
            "delta": rec.delta if rec else None, "retention": rec.retention if rec else None,
            "params_remaining": rec.params_remaining if rec else None, "post_sparsity": res.sparsity,
        }
        rows.append(row)
        runs.append(row)
    path = out / "transfer.csv"
    rp.write_csv(path, rp.TRANSFER_FIELDS, rows)
    _write_run(out, cfg, "transfer", runs, started, [path])
    return path


def _pick_images(test, n: int) -> list[int]:
    fakes = [i for i in range(len(test)) if test.labels[i] == 1]
    reals = [i for i in range(len(test)) if test.labels[i] == 0]
    k = (n + 1) // 2
    return sorted(fakes[:k] + reals[: n - k])


def cmd_gradcam(cfg: ExperimentConfig, out: Path) -> Path:
    started = time.time()
    src = Path(cfg.prune_dir) if cfg.prune_dir else out
    curve = rp.read_csv(src / "sparsity_curve.csv", rp.CURVE_FIELDS)
    bundle = resolve_data(cfg, src)
    test = bundle.test
    images = _pick_images(test, cfg.gradcam_images)
    gdir = out / "gradcam"
    gdir.mkdir(parents=True, exist_ok=True)
    by_run = defaultdict(list)
    for r in curve:
        by_run[r["run_id"]].append(r)
    rows, artifacts = [], []
    for rid, recs in by_run.items():
        arch, seed = recs[0]["arch"], int(recs[0]["seed"])

        def load(rnd):
            m = build_model(arch, seed, test.input_shape)
            load_checkpoint(src / "checkpoints" / f"{rid}_r{rnd}.wtck", m)
            return m

        dense = load(0)
        layer = cfg.gradcam_layer or dense.conv_taps[-1]
        base = {i: gradcam(dense, test.x([i]), int(test.labels[i]), layer) for i in images}
        for p in cfg.gradcam_grid():
            rec = min(recs, key=lambda r: (abs(float(r["sparsity"]) - p), int(r["round"])))
            model = load(int(rec["round"]))
            for i in images:
                x = test.x([i])
                hm = gradcam(model, x, int(test.labels[i]), layer)
                path = gdir / f"{rid}_img{i:05d}_p{round(100 * p):02d}.ppm"
                write_overlay(path, hm, x[0])
                artifacts.append(path)
                rows.append(
                    {
                        "run_id": rid, "image_id": i, "class": int(test.labels[i]),
                        "sparsity": float(rec["sparsity"]), "delta_frobenius": attention_shift(base[i], hm),
                    }
                )
    path = out / "attention_shift.csv"
    rp.write_csv(path, rp.SHIFT_FIELDS, rows)
    _write_run(out, cfg, "gradcam", [], started, artifacts + [path])
    return path


def _nanmedian(vals) -> float:
    finite = [v for v in vals if not np.isnan(v)]
    return float(median(finite)) if finite else float("nan")


def survival_bias_summary(sens_rows: list[dict]) -> list[dict]:
    """Median over seeds of each artifact's sensitivity retention at max sparsity."""
    per_seed = defaultdict(lambda: defaultdict(list))
    freqs = {}
    for r in sens_rows:
        per_seed[r["run_id"]][r["artifact_id"]].append((float(r["sparsity"]), float(r["sensitivity"])))
        freqs[r["artifact_id"]] = float(r["frequency"])
    reports = [survival_bias_report(series, freqs) for series in per_seed.values()]
    corrs = [r.correlation for r in reports if r.correlation is not None]
    status = "ok" if corrs else reports[0].correlation_status
    corr = median(corrs) if corrs else None
    out = []
    for a in sorted(freqs):
        vals = [r.retention[a] for r in reports if a in r.retention]
        out.append(
            {
                "artifact_id": a, "frequency": freqs[a], "retention_median": _nanmedian(vals),
                "seeds": len(vals), "rank_correlation": corr, "correlation_status": status,
                "negative_bias": "" if corr is None else str(corr > 0).lower(),
            }
        )
    return out


def cmd_report(out: Path) -> Path:
    curve_path = out / "sparsity_curve.csv"
    if not curve_path.is_file():
        raise FileNotFoundError(f"{curve_path} not found")
    table = rp.retention_table(rp.read_csv(curve_path, rp.CURVE_FIELDS))
    path = out / "retention_table.csv"
    rp.write_csv(path, rp.RETENTION_FIELDS, table)
    print(rp.render_table(table))
    sens = out / "sensitivity.csv"
    if sens.is_file():
        try:
            rows = survival_bias_summary(rp.read_csv(sens, rp.SENSITIVITY_FIELDS))
        except ValueError as exc:
            print(f"survival bias: not reported ({exc})")
            return path
        rp.write_csv(out / "survival_bias.csv", rp.BIAS_FIELDS, rows)
        for r in rows:
            print(
                f"{r['artifact_id']:<8} f={r['frequency']:.3f} retention={r['retention_median']:.3f} "
                f"corr={rp.fmt(r['rank_correlation']) or r['correlation_status']}"
            )
    return path


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "prune": cmd_prune,
    "transfer": cmd_transfer,
    "gradcam": cmd_gradcam,
}


def main(argv=None) -> int:
    parser = _Parser(prog="wt", description="winning-ticket search for small deepfake detectors")
    parser.add_argument("command", choices=[*COMMANDS, "report"])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help="output directory (report: the run directory to aggregate)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limiter = _limit_threads()
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else None
        if args.command == "report":
            target = args.out or (cfg.out_dir if cfg else None)
            if not target:
                raise ValueError("report needs --out DIR or --config")
            cmd_report(Path(target))
            return 0
        if cfg is None:
            raise ValueError(f"{args.command} needs --config")
        if args.seed is not None:
            cfg = cfg.replace(seeds=str(args.seed))
        if args.out:
            cfg = cfg.replace(out_dir=args.out)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
        return 0
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one line per failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
