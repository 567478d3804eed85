"""Experiment configuration: a YAML document mapped onto nested dataclasses.

Example::

    name: synthetic
    seed: 7
    out_dir: runs/synthetic
    manifests: [data/synthetic/manifest.csv]
    policy: drop-incomplete
    feature: {window_seconds: 6.0, n_mfcc: 40}
    augment: {pitch_semitone_range: [-2, 2], n_time_masks: 2}
    model: {stage_channels: [32, 64, 128, 256]}
    train: {epochs: 100, batch_size: 32, learning_rate: 1.0e-4, patience: 15}
    baselines: [LR, MLP, RF]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .dataset import POLICIES
from .dsp import FeatureConfig, config_digest
from .errors import ConfigError
from .model import ModelConfig, TrainConfig
from .baselines import BASELINE_KINDS

_SECTIONS = {"feature": FeatureConfig, "augment": AugmentConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass(frozen=True)
class ExperimentConfig:
    manifests: tuple[str, ...]
    name: str = "experiment"
    seed: int = 0
    out_dir: str = "runs/experiment"
    policy: str = "drop-incomplete"
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: tuple[str, ...] = BASELINE_KINDS
    baseline_params: dict = field(default_factory=dict)
    ci_level: float = 0.95

    def __post_init__(self):
        if isinstance(self.manifests, (str, Path)):
            object.__setattr__(self, "manifests", (str(self.manifests),))
        object.__setattr__(self, "manifests", tuple(str(m) for m in self.manifests))
        object.__setattr__(self, "baselines", tuple(self.baselines))
        if not self.manifests:
            raise ConfigError("config lists no manifests")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        bad = [b for b in self.baselines if b not in BASELINE_KINDS]
        if bad:
            raise ConfigError(f"unknown baselines {bad}")
        if not 0 < self.ci_level < 1:
            raise ConfigError("ci_level must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "manifests": list(self.manifests),
            "policy": self.policy,
            "feature": self.feature.to_dict(),
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "baselines": list(self.baselines),
            "baseline_params": self.baseline_params,
            "ci_level": self.ci_level,
        }

    def config_hash(self) -> str:
        return config_digest(self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    d = dict(d or {})
    kwargs = {}
    try:
        for key, cls in _SECTIONS.items():
            if key in d:
                section = d.pop(key) or {}
                if not isinstance(section, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                kwargs[key] = cls(**section)
        manifests = d.pop("manifests", None) or d.pop("manifest", None)
        if manifests is None:
            raise ConfigError("config needs 'manifests'")
        if isinstance(manifests, str):
            manifests = [manifests]
        if base_dir is not None:
            manifests = [str(m) if Path(m).is_absolute() else str(base_dir / m) for m in manifests]
        return ExperimentConfig(manifests=tuple(manifests), **d, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config key: {exc}") from exc


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML) to a config dict."""
    d = yaml.safe_load(yaml.safe_dump(d))  # deep copy
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_scalar(value)
    return d


def load_config(path, overrides=(), seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Read a YAML config.

    Relative ``manifests`` and ``out_dir`` entries resolve against the config's
    directory; an ``out_dir`` argument is taken as given.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    elif "out_dir" in raw and not Path(raw["out_dir"]).is_absolute():
        raw["out_dir"] = str(path.parent / raw["out_dir"])
    return config_from_dict(raw, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
