"""INI run configuration (``[section]`` headers, ``key = value``, ``#`` comments)."""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..data import AugmentConfig, SynthSceneConfig
from ..errors import ConfigError
from ..losses import LossWeights
from ..network import ModelConfig
from ..preproc import SensorConfig

PathLike = Union[str, os.PathLike]

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    final_lr: float = 1e-5
    warmup_epochs: float = 4.0
    weight_decay: float = 0.003
    batch_size: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0 or self.final_lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("optimizer settings must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    """Either a directory of ``.bin``/``.label`` scans or a synthetic set."""

    dir: Optional[str] = None
    count: int = 80
    train_fraction: float = 0.8
    split_seed: int = 0
    augment: bool = True
    synth: SynthSceneConfig = field(default_factory=SynthSceneConfig)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=4))
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 20
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.data.dir is None:
            self.data.synth.check_sensor(self.model.sensor)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# ----------------------------------------------------------------- parsing


def _convert(raw: str, like, key: str):
    text = raw.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [v.strip() for v in text.split(",") if v.strip()]
            kind = type(like[0]) if like else int
            return tuple(kind(v) for v in items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return text


def _apply(obj, section: dict[str, str], where: str):
    """Replace dataclass fields of ``obj`` from string values."""
    known = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        changes[key] = _convert(raw, getattr(obj, key), f"{where}.{key}")
    try:
        return dataclasses.replace(obj, **changes)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _sensor(section: dict[str, str], base: SensorConfig, where: str) -> SensorConfig:
    def get(key, default, kind):
        return kind(section.pop(key)) if key in section else default

    try:
        return SensorConfig(
            get("height", base.height, int),
            get("width", base.width, int),
            math.radians(get("fov_up_deg", math.degrees(base.fov_up), float)),
            math.radians(get("fov_down_deg", math.degrees(base.fov_down), float)),
        )
    except ValueError as exc:
        raise ConfigError(f"[{where}] bad sensor value: {exc}") from exc


def _synth(section: dict[str, str], base: SynthSceneConfig) -> SynthSceneConfig:
    section = dict(section)
    for key in ("fov_up", "fov_down"):
        if f"{key}_deg" in section:
            section[key] = repr(math.radians(float(section.pop(f"{key}_deg"))))
    return _apply(base, section, "synth")


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {name: dict(parser[name]) for name in parser.sections()}
    allowed = {"run", "model", "loss", "optim", "data", "augment", "synth"}
    unknown = set(sections) - allowed
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    model_sec = dict(sections.get("model", {}))
    base_model = ModelConfig(num_classes=4)
    sensor = _sensor(model_sec, base_model.sensor, "model")
    model = _apply(base_model.replace(sensor=sensor), model_sec, "model")

    loss = _apply(LossWeights(), sections.get("loss", {}), "loss")
    optim = _apply(OptimConfig(), sections.get("optim", {}), "optim")

    aug_sec = dict(sections.get("augment", {}))
    aug = AugmentConfig()
    if "rotation_deg" in aug_sec:
        r = math.radians(float(aug_sec.pop("rotation_deg")))
        aug = dataclasses.replace(aug, rotation=(-r, r))
    if "scale_min" in aug_sec or "scale_max" in aug_sec:
        lo = float(aug_sec.pop("scale_min", aug.scale[0]))
        hi = float(aug_sec.pop("scale_max", aug.scale[1]))
        aug = dataclasses.replace(aug, scale=(lo, hi))
    aug = _apply(aug, aug_sec, "augment")

    # synthetic scans default to the model's range-image grid
    synth_base = SynthSceneConfig(
        beams=sensor.height, azimuth_steps=sensor.width, fov_up=sensor.fov_up, fov_down=sensor.fov_down
    )
    synth = _synth(sections.get("synth", {}), synth_base)
    data_sec = dict(sections.get("data", {}))
    data_dir = data_sec.pop("dir", "").strip() or None
    data = _apply(DataConfig(dir=data_dir, synth=synth), data_sec, "data")

    run_sec = sections.get("run", {})
    bad = set(run_sec) - {"epochs", "seed", "workers", "out"}
    if bad:
        raise ConfigError(f"[run] unknown keys: {sorted(bad)}")
    return _apply(RunConfig(model=model, loss=loss, optim=optim, data=data, augment=aug), run_sec, "run")


def load_run_config(path: PathLike) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


def load_synth_config(path: PathLike) -> SynthSceneConfig:
    """The ``[synth]`` section of a config file (the whole file may be just that)."""
    return load_run_config(path).data.synth
