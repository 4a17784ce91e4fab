"""Run configuration: a YAML file with one section per module.

Only ``seed`` is mandatory; every other key falls back to the desk-scale
default. Per-stage seeds are derived from the global seed by counter-based
splitting, so adding a stage never shifts the seeds of the others.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attacks import KINDS, AttackSpec, default_suite
from .evaluation import DESK_HIGH, DESK_LOW, FidelityLevel, check_levels
from .search import EvoConfig
from .supernet import NetConfig, TrainConfig

STAGES = ("train-supernet", "sample-correlate", "fit-surrogate", "search", "report")
SEED_NAMES = STAGES + ("attacks", "retrain", "data-train", "data-test")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    classes: int = 10
    train_size: int = 2048
    test_size: int = 1024
    resolution: int = 16

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "cifar":
            if not self.path or not Path(self.path).is_dir():
                raise ConfigError(f"cifar data directory {self.path!r} does not exist")
        if self.classes < 2:
            raise ConfigError("data.classes must be >= 2")


@dataclass
class SupernetConfig:
    channels: int = 8
    layers: int = 4
    stem_multiplier: int = 3
    stem_stride: int = 2
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    calibration: int = 256

    def net(self, classes: int, in_channels: int) -> NetConfig:
        return NetConfig(self.channels, self.layers, classes, in_channels, self.stem_multiplier, self.stem_stride)

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=seed, calibration=self.calibration)


@dataclass
class MergeConfig:
    tau: float = 0.7
    samples: int = 20
    method: str = "pearson"
    linkage: str = "leader"
    plan: str | None = None

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("merge.tau must lie in (0, 1]")
        if self.samples < 2:
            raise ConfigError("merge.samples must be >= 2")
        if self.method not in ("pearson", "spearman"):
            raise ConfigError(f"unknown correlation method {self.method!r}")
        if self.linkage not in ("leader", "transitive"):
            raise ConfigError(f"unknown linkage {self.linkage!r}")
        if self.plan is not None and not Path(self.plan).is_file():
            raise ConfigError(f"merge plan file {self.plan!r} does not exist")


@dataclass
class SurrogateConfig:
    hidden: tuple[int, ...] = (64, 64)
    pairs: int = 200
    epochs: int = 500
    lr: float = 3e-3

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.pairs < 2:
            raise ConfigError("surrogate.pairs must be >= 2")


@dataclass
class RetrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    attacks: dict[str, dict] = field(default_factory=dict)
    fidelity: dict[str, int] = field(default_factory=lambda: {"low": DESK_LOW.samples, "high": DESK_HIGH.samples})
    merge: MergeConfig = field(default_factory=MergeConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    search: dict[str, Any] = field(default_factory=dict)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    output: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        unknown = set(self.attacks) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown attack kinds {sorted(unknown)}")
        check_levels(self.low, self.high)
        if self.high.samples > self.data.test_size and self.data.source == "synthetic":
            raise ConfigError("high fidelity needs more samples than the test split holds")
        self.suite()
        self.evo()

    @property
    def low(self) -> FidelityLevel:
        return FidelityLevel("low", int(self.fidelity["low"]))

    @property
    def high(self) -> FidelityLevel:
        return FidelityLevel("high", int(self.fidelity["high"]))

    def suite(self) -> list[AttackSpec]:
        specs = default_suite(self.stage_seed("attacks"))
        try:
            return [dataclasses.replace(s, **self.attacks.get(s.kind, {})) for s in specs]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad attack override: {exc}") from exc

    def evo(self) -> EvoConfig:
        try:
            return EvoConfig(**{**self.search, "seed": self.stage_seed("search")})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad search section: {exc}") from exc

    def stage_seed(self, stage: str) -> int:
        names = SEED_NAMES
        if stage not in names:
            raise KeyError(stage)
        seq = np.random.SeedSequence(self.seed, spawn_key=(names.index(stage),))
        return int(seq.generate_state(1)[0])

    def stage_seeds(self) -> dict[str, int]:
        return {s: self.stage_seed(s) for s in SEED_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["surrogate"]["hidden"] = list(d["surrogate"]["hidden"])
        return d

    def hash(self) -> str:
        """Digest of everything that affects results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"data": DataConfig, "supernet": SupernetConfig, "merge": MergeConfig,
             "surrogate": SurrogateConfig, "retrain": RetrainConfig}


def from_dict(raw: dict, seed: int | None = None, output: str | None = None) -> RunConfig:
    raw = dict(raw or {})
    if seed is not None:
        raw["seed"] = seed
    if output is not None:
        raw["output"] = output
    if "seed" not in raw:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    kwargs = {}
    for key, value in raw.items():
        cls = _SECTIONS.get(key)
        if cls is not None:
            try:
                kwargs[key] = cls(**(value or {}))
            except TypeError as exc:
                raise ConfigError(f"section {key!r}: {exc}") from exc
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load(path: str | Path | None, seed: int | None = None, output: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    return from_dict(raw, seed, output)


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
