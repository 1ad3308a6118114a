"""Model and training configuration, named presets, and the YAML config file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from hstl.arme import RegionConvSpec
from hstl.errors import ConfigError, DataError
from hstl.hierarchy import PartitionHierarchy, default_hierarchy, flat_hierarchy, validate_hierarchy


@dataclass(frozen=True)
class ArmeStage:
    """One region-wise conv stack applied at a hierarchy level."""

    level: int
    channels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


@dataclass(frozen=True)
class HstlConfig:
    hierarchy: PartitionHierarchy = field(default_factory=default_hierarchy)
    arme: tuple[ArmeStage, ...] = (
        ArmeStage(1, (1, 32)),
        ArmeStage(2, (32, 32, 64)),
        ArmeStage(3, (64, 128, 128)),
    )
    fta_level: int | None = 2  # None only for two-level hierarchies, which have no room for it
    embedding_dim: int = 128
    spatial_downsample_after_level1: bool = False
    label_smoothing: float = 0.0
    input_size: tuple[int, int] = (64, 44)
    clip_length: int = 30
    kernel: tuple[int, int, int] = (3, 3, 3)
    negative_slope: float = 0.01
    region_norm: bool = False
    gem_p: float = 6.5
    margin: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "arme", tuple(
            s if isinstance(s, ArmeStage) else ArmeStage(**s) for s in self.arme))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "kernel", tuple(self.kernel))

    @property
    def num_levels(self) -> int:
        return self.hierarchy.num_levels

    def conv_spec(self, stage: ArmeStage) -> RegionConvSpec:
        return RegionConvSpec(stage.channels, self.kernel, self.negative_slope, self.region_norm)

    def strip_count(self) -> int:
        taps = sum(self.hierarchy.level(s.level).num_groups for s in self.arme)
        if self.fta_level is not None:
            taps += self.hierarchy.level(self.fta_level).num_groups
        return taps + self.hierarchy.levels[-1].num_groups

    def problems(self) -> list[str]:
        out = [f"hierarchy: {v}" for v in validate_hierarchy(self.hierarchy)]
        if out:
            return out
        big_l = self.num_levels
        if big_l < 2:
            out.append(f"hierarchy: need at least 2 levels, got {big_l}")
        if self.fta_level is None:
            if big_l > 2:
                out.append("fta_level: required when L > 2, got None")
        elif not 2 <= self.fta_level <= big_l - 1:
            out.append(f"fta_level: must lie in [2, L-1] = [2, {big_l - 1}], got {self.fta_level}")
        levels = [s.level for s in self.arme]
        if sorted(levels) != levels or set(levels) != set(range(1, big_l)):
            out.append(f"arme: stages must cover levels 1..{big_l - 1} in order, got {levels}")
        prev = 1
        for i, s in enumerate(self.arme):
            if len(s.channels) < 2 or s.channels[0] != prev or min(s.channels) < 1:
                out.append(f"arme[{i}].channels: chain {list(s.channels)} must start at {prev}")
            prev = s.channels[-1] if s.channels else prev
        h, w = self.input_size
        k = self.hierarchy.k
        if self.spatial_downsample_after_level1:
            if h % 2 or w % 2:
                out.append(f"input_size: {self.input_size} must be even for spatial downsampling")
            h //= 2
        if h % k:
            out.append(f"input_size: feature height {h} not divisible by k={k}")
        if self.clip_length < 3 or self.clip_length % 3:
            out.append(f"clip_length: must be a positive multiple of 3, got {self.clip_length}")
        if self.embedding_dim < 1:
            out.append(f"embedding_dim: must be positive, got {self.embedding_dim}")
        if not 0.0 <= self.label_smoothing < 1.0:
            out.append(f"label_smoothing: must lie in [0, 1), got {self.label_smoothing}")
        if any(k % 2 == 0 for k in self.kernel):
            out.append(f"kernel: dims must be odd, got {list(self.kernel)}")
        if self.gem_p <= 0:
            out.append(f"gem_p: must be positive, got {self.gem_p}")
        return out

    def validate(self) -> "HstlConfig":
        probs = self.problems()
        if probs:
            raise ConfigError("invalid config: " + "; ".join(probs))
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hierarchy"] = {"k": self.hierarchy.k, "levels": [lv.to_text() for lv in self.hierarchy.levels]}
        d["arme"] = [{"level": s.level, "channels": list(s.channels)} for s in self.arme]
        d["input_size"] = list(self.input_size)
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HstlConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        if "hierarchy" in d:
            h = d["hierarchy"]
            if isinstance(h, str):
                d["hierarchy"] = PartitionHierarchy.from_text(h)
            else:
                text = "\n".join([str(h["k"])] + list(h["levels"]))
                d["hierarchy"] = PartitionHierarchy.from_text(text)
        if "arme" in d:
            d["arme"] = tuple(ArmeStage(int(s["level"]), tuple(s["channels"])) for s in d["arme"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-5
    weight_decay: float = 5e-4
    momentum: float = 0.9
    milestones: tuple[int, ...] = (70_000,)
    gamma: float = 0.1
    iterations: int = 100_000
    batch_p: int = 8
    batch_k: int = 8
    checkpoint_every: int = 10_000
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def problems(self) -> list[str]:
        out = []
        if self.optimizer not in ("adam", "sgd"):
            out.append(f"optimizer: expected adam or sgd, got {self.optimizer!r}")
        if self.lr <= 0:
            out.append(f"lr: must be positive, got {self.lr}")
        if self.iterations < 1:
            out.append(f"iterations: must be positive, got {self.iterations}")
        if self.batch_p < 1 or self.batch_k < 1:
            out.append(f"batch: P and K must be positive, got ({self.batch_p}, {self.batch_k})")
        if self.checkpoint_every < 1:
            out.append("checkpoint_every: must be positive")
        return out

    def scaled(self, iterations: int) -> "TrainConfig":
        """Shrink the schedule to ``iterations``, keeping milestones at the same fractions."""
        frac = iterations / self.iterations
        return replace(self, iterations=iterations,
                       milestones=tuple(max(1, round(m * frac)) for m in self.milestones),
                       checkpoint_every=max(1, min(self.checkpoint_every, iterations)))


@dataclass(frozen=True)
class RunConfig:
    model: HstlConfig = field(default_factory=HstlConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        probs = [f"model.{p}" for p in self.model.problems()] + [f"train.{p}" for p in self.train.problems()]
        if probs:
            raise ConfigError("invalid config: " + "; ".join(probs))
        return self

    def to_dict(self) -> dict[str, Any]:
        t = asdict(self.train)
        t["milestones"] = list(self.train.milestones)
        return {"model": self.model.to_dict(), "train": t}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d or {})
        base = preset(d.pop("preset")) if "preset" in d else cls()
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        model = base.model
        if "model" in d:
            merged = {**base.model.to_dict(), **d["model"]}
            model = HstlConfig.from_dict(merged)
        train = base.train
        if "train" in d:
            known = {f.name for f in fields(TrainConfig)}
            bad = set(d["train"]) - known
            if bad:
                raise ConfigError(f"unknown train config fields {sorted(bad)}")
            train = replace(base.train, **d["train"])
        return cls(model, train)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ConfigError(f"config {path}: {exc}") from exc


def _large(iterations: int, batch: tuple[int, int]) -> RunConfig:
    model = HstlConfig(
        arme=(ArmeStage(1, (1, 64)), ArmeStage(2, (64, 64, 64)),
              ArmeStage(3, (64, 128, 128)), ArmeStage(3, (128, 256, 256))),
        spatial_downsample_after_level1=True,
        label_smoothing=0.1,
    )
    train = TrainConfig(optimizer="sgd", lr=0.1, milestones=(150_000, 200_000), iterations=iterations,
                        batch_p=batch[0], batch_k=batch[1], checkpoint_every=10_000)
    return RunConfig(model, train)


DESK_MODEL = HstlConfig(
    arme=(ArmeStage(1, (1, 4)), ArmeStage(2, (4, 8, 8)), ArmeStage(3, (8, 16, 16))),
    embedding_dim=32,
    spatial_downsample_after_level1=True,
    input_size=(32, 22),
    clip_length=12,
)


def preset(name: str) -> RunConfig:
    """Named configurations: the full-scale ones and the CPU-sized ``desk`` run."""
    name = name.lower()
    if name == "casia":
        return RunConfig(HstlConfig(), TrainConfig())
    if name == "oumvlp":
        return _large(250_000, (32, 8))
    if name == "grew":
        return _large(250_000, (32, 4))
    if name == "gait3d":
        return _large(210_000, (32, 4))
    if name == "desk":
        return RunConfig(DESK_MODEL, TrainConfig(optimizer="adam", lr=1e-3, weight_decay=5e-4,
                                                 milestones=(420,), iterations=600, batch_p=8, batch_k=2,
                                                 checkpoint_every=200))
    if name == "desk-flat":
        return RunConfig(replace(DESK_MODEL, hierarchy=flat_hierarchy()), preset("desk").train)
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("casia", "oumvlp", "grew", "gait3d", "desk", "desk-flat")
