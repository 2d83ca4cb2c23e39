"""Procedural real-vs-manipulated image datasets and rare-artifact diagnostics.

Real samples are face-like compositions: a smooth background gradient, a
soft elliptical face and two dark eye blobs, with per-image jitter. A fake
sample is generated the same way and then receives exactly one localized
artifact drawn from a weighted catalog:

``seam``     horizontal band with a luminance offset (two hard edges)
``checker``  one-pixel checkerboard patch
``noise``    patch of Gaussian noise
``tint``     patch with one colour channel shifted

Images are stored as 8-bit P6 (colour) or P5 (grey) files next to a
``manifest.csv`` that records ground truth and a SHA-256 per file.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

from . import pnm

SPLITS = ("train", "test")
LABELS = {"real": 0, "fake": 1}
MANIFEST_FIELDS = ["path", "split", "label", "artifact_id", "amplitude", "sha256"]
ARTIFACT_IDS = ("seam", "checker", "noise", "tint")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Artifact:
    artifact_id: str
    weight: float
    amp_lo: float
    amp_hi: float

    def __post_init__(self):
        if self.artifact_id not in ARTIFACT_IDS:
            raise ValueError(f"unknown artifact {self.artifact_id!r}; choose from {ARTIFACT_IDS}")
        if not self.weight > 0:
            raise ValueError(f"artifact weight must be positive, got {self.weight}")
        if not 0 <= self.amp_lo <= self.amp_hi:
            raise ValueError(f"bad amplitude range {self.amp_lo}-{self.amp_hi}")


DEFAULT_CATALOG = (
    Artifact("seam", 1.0, 0.12, 0.30),
    Artifact("checker", 1.0, 0.10, 0.25),
    Artifact("noise", 1.0, 0.10, 0.25),
    Artifact("tint", 1.0, 0.12, 0.30),
)


def parse_catalog(text: str) -> tuple[Artifact, ...]:
    """Parse ``id:weight:lo-hi;id:weight:lo-hi;...``."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        try:
            aid, w, rng = item.split(":")
            lo, hi = rng.split("-")
            out.append(Artifact(aid.strip(), float(w), float(lo), float(hi)))
        except ValueError as exc:
            raise ValueError(f"bad artifact spec {item!r}: {exc}") from None
    if not out:
        raise ValueError("empty artifact catalog")
    return tuple(out)


def format_catalog(catalog: Sequence[Artifact]) -> str:
    return ";".join(f"{a.artifact_id}:{a.weight:g}:{a.amp_lo:g}-{a.amp_hi:g}" for a in catalog)


def scale_catalog(catalog: Sequence[Artifact], factor: float) -> tuple[Artifact, ...]:
    return tuple(Artifact(a.artifact_id, a.weight, a.amp_lo * factor, a.amp_hi * factor) for a in catalog)


@dataclass
class SynthConfig:
    size: int = 64
    channels: int = 3
    train_samples: int = 8000
    test_samples: int = 2000
    catalog: tuple[Artifact, ...] = DEFAULT_CATALOG
    seed: int = 0

    def validate(self) -> None:
        if self.size not in (32, 64):
            raise ValueError(f"image size must be 32 or 64, got {self.size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        for n in (self.train_samples, self.test_samples):
            if n <= 0:
                raise ValueError("zero samples requested")
            if n % 2:
                raise ValueError(f"samples per split must be even for class balance, got {n}")
        if not self.catalog:
            raise ValueError("empty artifact catalog")

    def frequencies(self) -> dict[str, float]:
        total = sum(a.weight for a in self.catalog)
        return {a.artifact_id: a.weight / total for a in self.catalog}


# ---------------------------------------------------------------------------
# image synthesis
# ---------------------------------------------------------------------------


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_face(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    """Float (H, W, C) image in [0, 1], already on the 8-bit grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) + 0.5
    c0 = rng.uniform(0.2, 0.6, channels)
    c1 = rng.uniform(0.2, 0.6, channels)
    img = c0 + (c1 - c0) * ramp[..., None]

    cy = 0.5 + rng.uniform(-0.06, 0.06)
    cx = 0.5 + rng.uniform(-0.06, 0.06)
    ay = rng.uniform(0.30, 0.38)
    ax = rng.uniform(0.22, 0.28)
    r = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    face = np.clip((1.0 - r) / 0.08, 0.0, 1.0)[..., None]
    skin = rng.uniform(0.55, 0.8) * np.ones(channels)
    if channels == 3:
        skin *= (1.0, rng.uniform(0.78, 0.9), rng.uniform(0.62, 0.78))
    img = img * (1 - face) + skin * face

    ey = cy - ay * rng.uniform(0.2, 0.3)
    dx = ax * rng.uniform(0.38, 0.48)
    sig = rng.uniform(0.025, 0.04)
    for ex in (cx - dx, cx + dx):
        blob = np.exp(-(((yy - ey) ** 2 + (xx - ex) ** 2) / (2 * sig**2)))[..., None]
        img = img * (1 - 0.8 * blob) + 0.1 * 0.8 * blob
    img = img + rng.normal(0.0, 0.01, img.shape)
    return _quantize(img).astype(np.float64) / 255.0


def _patch(rng, size, lo_frac, hi_frac):
    side = int(rng.integers(int(size * lo_frac), int(size * hi_frac) + 1))
    y0 = int(rng.integers(int(size * 0.15), size - side - int(size * 0.1) + 1))
    x0 = int(rng.integers(int(size * 0.15), size - side - int(size * 0.1) + 1))
    return y0, y0 + side, x0, x0 + side


def apply_artifact(img: np.ndarray, artifact_id: str, amp: float, rng: np.random.Generator):
    """Return ``(fake, region)``; ``fake`` differs from ``img`` only inside
    ``region = (y0, y1, x0, x1)``."""
    size, channels = img.shape[0], img.shape[2]
    out = img.copy()
    if artifact_id == "seam":
        h = int(rng.integers(max(2, size // 16), size // 8 + 1))
        y0 = int(rng.integers(int(size * 0.3), int(size * 0.7) - h + 1))
        x0, x1 = int(size * 0.2), int(size * 0.8)
        region = (y0, y0 + h, x0, x1)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out[y0 : y0 + h, x0:x1] += sign * amp
    elif artifact_id == "checker":
        region = _patch(rng, size, 0.2, 0.3)
        y0, y1, x0, x1 = region
        yy, xx = np.mgrid[y0:y1, x0:x1]
        out[y0:y1, x0:x1] += (((yy + xx) % 2) * 2.0 - 1.0)[..., None] * amp
    elif artifact_id == "noise":
        region = _patch(rng, size, 0.2, 0.3)
        y0, y1, x0, x1 = region
        out[y0:y1, x0:x1] += rng.normal(0.0, 1.0, (y1 - y0, x1 - x0, channels)) * amp
    elif artifact_id == "tint":
        region = _patch(rng, size, 0.25, 0.35)
        y0, y1, x0, x1 = region
        ch = int(rng.integers(channels))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out[y0:y1, x0:x1, ch] += sign * amp
    else:
        raise ValueError(f"unknown artifact {artifact_id!r}")
    return _quantize(out), region


@dataclass
class SampleSpec:
    split: str
    label: str
    index: int
    artifact_id: str = ""
    amplitude: float = float("nan")
    region: tuple[int, int, int, int] | None = None


def synth_sample(config: SynthConfig, split: str, label: str, index: int):
    """Deterministically produce one sample as ``(uint8 (H, W, C), SampleSpec, base)``.

    ``base`` is the artifact-free image the fake was derived from.
    """
    rng = np.random.default_rng([config.seed, SPLITS.index(split), LABELS[label], index])
    base = render_face(rng, config.size, config.channels)
    base_u8 = _quantize(base)
    spec = SampleSpec(split, label, index)
    if label == "real":
        return base_u8, spec, base_u8
    weights = np.array([a.weight for a in config.catalog], dtype=np.float64)
    art = config.catalog[int(rng.choice(len(config.catalog), p=weights / weights.sum()))]
    amp = round(float(rng.uniform(art.amp_lo, art.amp_hi)), 6)
    img, region = apply_artifact(base, art.artifact_id, amp, rng)
    spec.artifact_id, spec.amplitude, spec.region = art.artifact_id, amp, region
    return img, spec, base_u8


def synth_generate(config: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Write the dataset under ``out_dir`` with a ``manifest.csv``; returns the directory."""
    config.validate()
    root = Path(out_dir)
    ext = ".ppm" if config.channels == 3 else ".pgm"
    rows = []
    for split, n in zip(SPLITS, (config.train_samples, config.test_samples)):
        for label in ("real", "fake"):
            d = root / split / label
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n // 2):
                img, spec, _ = synth_sample(config, split, label, i)
                data = pnm.encode(img[..., 0] if config.channels == 1 else img)
                rel = f"{split}/{label}/{i:06d}{ext}"
                (root / rel).write_bytes(data)
                rows.append(
                    {
                        "path": rel,
                        "split": split,
                        "label": label,
                        "artifact_id": spec.artifact_id,
                        "amplitude": "" if label == "real" else f"{spec.amplitude:.6f}",
                        "sha256": hashlib.sha256(data).hexdigest(),
                    }
                )
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return root


def directory_digest(root: str | os.PathLike) -> str:
    """SHA-256 over every file (relative path + bytes), in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64, 0 real / 1 fake
    artifacts: list[str] = field(default_factory=list)
    amplitudes: np.ndarray | None = None
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def x(self, idx=slice(None)) -> np.ndarray:
        return self.images[idx].astype(np.float32) / np.float32(255.0)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            [self.artifacts[i] for i in idx] if self.artifacts else [],
            None if self.amplitudes is None else self.amplitudes[idx],
            [self.paths[i] for i in idx] if self.paths else [],
        )

    def permutation(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def batches(
        self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.permutation(seed, epoch) if shuffle else np.arange(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            yield self.x(idx), self.labels[idx]

    def split_validation(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic, class-stratified holdout."""
        if fraction <= 0:
            return self, self.subset(np.arange(0))
        rng = np.random.default_rng([seed, 0x5EED])
        keep, val = [], []
        for cls in (0, 1):
            idx = np.flatnonzero(self.labels == cls)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(len(idx) * fraction))
            val.append(idx[:k])
            keep.append(idx[k:])
        return self.subset(np.sort(np.concatenate(keep))), self.subset(np.sort(np.concatenate(val)))


@dataclass
class DatasetBundle:
    root: Path
    train: Dataset
    test: Dataset
    fingerprint: str  # SHA-256 of manifest.csv


def load_dataset(root: str | os.PathLike, verify: bool = True) -> DatasetBundle:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if not manifest.is_file():
        raise DatasetError(f"{root}: no manifest.csv")
    raw = manifest.read_bytes()
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise DatasetError(f"{manifest}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise DatasetError(f"{manifest}: no samples")
    parts: dict[str, list] = {s: [] for s in SPLITS}
    shape = None
    for row in rows:
        path = root / row["path"]
        if not path.is_file():
            raise DatasetError(f"missing file {row['path']}")
        data = path.read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != row["sha256"]:
            raise DatasetError(f"checksum mismatch for {row['path']}")
        try:
            img = pnm.decode(data)
        except pnm.PnmError as exc:
            raise DatasetError(f"corrupt pixmap {row['path']}: {exc}") from None
        img = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(f"{row['path']}: shape {img.shape} differs from {shape}")
        if row["split"] not in parts or row["label"] not in LABELS:
            raise DatasetError(f"bad manifest row {row}")
        if (row["label"] == "real") != (row["artifact_id"] == ""):
            raise DatasetError(f"{row['path']}: label/artifact metadata disagree")
        parts[row["split"]].append((img, row))
    splits = {}
    for s, items in parts.items():
        if not items:
            raise DatasetError(f"{root}: split {s!r} is empty")
        splits[s] = Dataset(
            np.stack([i for i, _ in items]),
            np.array([LABELS[r["label"]] for _, r in items], dtype=np.int64),
            [r["artifact_id"] for _, r in items],
            np.array([float(r["amplitude"]) if r["amplitude"] else np.nan for _, r in items]),
            [r["path"] for _, r in items],
        )
    return DatasetBundle(root, splits["train"], splits["test"], hashlib.sha256(raw).hexdigest())


# ---------------------------------------------------------------------------
# rare-artifact diagnostics
# ---------------------------------------------------------------------------


@dataclass
class Sensitivity:
    artifact_id: str
    value: float  # P(predict fake | artifact present)
    half_width: float  # 95% Wilson interval half-width
    n: int


def wilson_half_width(k: int, n: int, z: float = 1.959963984540054) -> float:
    p = k / n
    denom = 1 + z * z / n
    return z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom


def artifact_sensitivity(model, test_set: Dataset, artifact_id: str, min_samples: int = 30, batch_size: int = 128) -> Sensitivity:
    from .training import predict

    idx = np.array([i for i, a in enumerate(test_set.artifacts) if a == artifact_id and test_set.labels[i] == 1])
    if len(idx) < min_samples:
        raise ValueError(f"only {len(idx)} fakes carry {artifact_id!r}; need at least {min_samples}")
    pred = predict(model, test_set.subset(idx), batch_size)
    k = int((pred == 1).sum())
    return Sensitivity(artifact_id, k / len(idx), wilson_half_width(k, len(idx)), len(idx))


@dataclass
class BiasReport:
    table: dict[str, list[tuple[float, float]]]  # artifact -> [(sparsity, sensitivity)]
    frequencies: dict[str, float]
    retention: dict[str, float]  # sensitivity at max sparsity / at min sparsity
    correlation: float | None  # Spearman correlation of frequency with retention
    correlation_status: str  # "ok" | "undefined" | "not-applicable"
    negative_bias: bool | None  # True when rarer artifacts keep less sensitivity
    max_sparsity: float = 0.0

    def rows(self) -> list[dict]:
        out = []
        for a, series in self.table.items():
            for s, v in series:
                out.append(
                    {
                        "artifact_id": a,
                        "frequency": self.frequencies[a],
                        "sparsity": s,
                        "sensitivity": v,
                        "retention_at_max": self.retention[a],
                    }
                )
        return out


def survival_bias_report(
    series: dict[str, Sequence[tuple[float, float]]], frequencies: dict[str, float]
) -> BiasReport:
    """Per-artifact sensitivity-vs-sparsity table with a frequency/retention rank correlation.

    Purely diagnostic; nothing here passes or fails.
    """
    if len(series) < 2:
        raise ValueError("survival bias report needs at least two artifacts")
    table = {a: sorted((float(s), float(v)) for s, v in pts) for a, pts in series.items()}
    for a, pts in table.items():
        if len(pts) < 3:
            raise ValueError(f"artifact {a!r} has {len(pts)} sparsity levels; need at least 3")
        if a not in frequencies:
            raise ValueError(f"no frequency given for artifact {a!r}")
    retention = {}
    for a, pts in table.items():
        dense = pts[0][1]
        retention[a] = pts[-1][1] / dense if dense > 0 else float("nan")
    names = list(table)
    f = np.array([frequencies[a] for a in names])
    r = np.array([retention[a] for a in names])
    if np.allclose(f, f[0]):
        corr, status = None, "not-applicable"
    elif np.any(np.isnan(r)) or np.allclose(r, r[0]):
        corr, status = None, "undefined"
    else:
        corr, status = float(stats.spearmanr(f, r).statistic), "ok"
    flag = None if corr is None else corr > 0
    return BiasReport(table, dict(frequencies), retention, corr, status, flag, max(p[-1][0] for p in table.values()))
