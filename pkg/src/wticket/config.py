"""Flat ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment, unknown keys are rejected.
Defaults follow the reference training protocol: Adam at lr 1e-4, 20% of
the remaining weights pruned per round for 8 rounds, early-stopping
patience 10.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DEFAULT_CATALOG, SynthConfig, format_catalog, parse_catalog, scale_catalog
from .models import ARCH_IDS
from .pruning import PruneSchedule
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


@dataclass
class ExperimentConfig:
    arch: str = "cnn5_desk"
    data_dir: str = ""
    # synthetic data, used when data_dir is empty
    synth_size: int = 64
    synth_channels: int = 3
    synth_train: int = 8000
    synth_test: int = 2000
    synth_seed: int = 0
    synth_artifacts: str = format_catalog(DEFAULT_CATALOG)
    synth_amplitude_scale: float = 1.0
    # pruning schedule
    mode: str = "imp_global"
    rounds: int = 8
    fraction: float = 0.2
    targets: str = ""
    rewind: str = "none"
    target_sparsity: float = 0.8
    # training
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10
    val_fraction: float = 0.1
    seeds: str = "0,1,2"
    out_dir: str = "runs"
    # grad-cam
    gradcam_layer: str = ""
    gradcam_images: int = 4
    gradcam_sparsities: str = "0,0.6,0.8"
    prune_dir: str = ""
    # transfer
    ticket: str = ""
    from_trained: bool = False
    transfer_baseline: bool = True
    # rare-artifact diagnostic
    sensitivity: bool = False
    sensitivity_floor: float = 0.75  # minimum acceptable post-pruning sensitivity

    # -- derived views ----------------------------------------------------

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def synth(self) -> SynthConfig:
        catalog = parse_catalog(self.synth_artifacts)
        if self.synth_amplitude_scale != 1.0:
            catalog = scale_catalog(catalog, self.synth_amplitude_scale)
        return SynthConfig(
            self.synth_size, self.synth_channels, self.synth_train, self.synth_test, catalog, self.synth_seed
        )

    def schedule(self) -> PruneSchedule:
        return PruneSchedule(
            mode=self.mode,
            rounds=self.rounds,
            fraction=self.fraction,
            explicit_targets=_floats(self.targets) or None,
            rewind=self.rewind,
            epochs_per_round=self.epochs,
            early_stop_patience=self.patience,
            target_sparsity=self.target_sparsity,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.batch_size, self.epochs, self.patience, self.val_fraction)

    def gradcam_grid(self) -> tuple[float, ...]:
        return _floats(self.gradcam_sparsities)

    # -- serialization ----------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every setting except where results are written."""
        text = "".join(ln + "\n" for ln in self.dumps().splitlines() if not ln.startswith("out_dir ="))
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, kinds[key], value, lineno)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def validate(self) -> None:
        if self.arch not in ARCH_IDS:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {ARCH_IDS}")
        try:
            self.schedule()
            self.synth().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("lr, batch_size, epochs and patience must be positive (batch_size >= 2)")
        if not self.seed_list():
            raise ConfigError("seeds list is empty")


def _coerce(key, kind, value, lineno):
    try:
        if kind in ("bool", bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {key} ({kind})") from None
