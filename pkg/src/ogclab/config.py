"""Experiment configuration and its flat TOML file format."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ogclab.losscore import BaseLoss
from ogclab.model import LrSchedule
from ogclab.noisegen import Asymmetric, InstanceDependent, Symmetric, circular_map
from ogclab.threshold import EMA, Fixed, Linear, Optimized


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "blobs"
    n_train: int = 512
    n_test: int = 2000
    n_classes: int = 2
    n_features: int = 2
    overlap: float = 0.6
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    # label noise
    noise: str = "symmetric"
    noise_rate: float = 0.4
    noise_projections: int = 1
    # loss and threshold
    loss: str = "ce"
    gamma: float = 0.5
    q: float = 0.7
    strategy: str = "optimized"
    epsilon0: float = 20.0
    fixed_tau: float = 2.0
    linear_beta: float = 10.0
    ema_alpha: float = 0.9999
    queue_size: int = 4096
    time_frame: int = 32
    warmup: int = 512
    grid_bins: int = 1024
    probe_tau: float = 2.0
    # optimization
    hidden: list = field(default_factory=lambda: [32, 32])
    batch_size: int = 32
    epochs: int = 100
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_milestones: list = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    param_clip: float = 5.0
    # seeds
    seed: int = 0
    data_seed: int = 0
    noise_seed: int = 0
    # outputs
    export_epochs: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.time_frame < 1:
            raise ConfigError("time_frame must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.queue_size < self.batch_size:
            raise ConfigError("queue_size must be >= batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.strategy not in ("optimized", "fixed", "linear", "ema", "none"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.noise not in ("none", "symmetric", "asymmetric", "instance"):
            raise ConfigError(f"unknown noise {self.noise!r}")
        try:
            self.base_loss()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def steps_per_epoch(self) -> int:
        return -(-self.n_train // self.batch_size)

    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch()

    def base_loss(self) -> BaseLoss:
        return BaseLoss(self.loss, gamma=self.gamma, q=self.q)

    def threshold_strategy(self):
        if self.strategy == "optimized":
            return Optimized(self.epsilon0)
        if self.strategy == "fixed":
            return Fixed(self.fixed_tau)
        if self.strategy == "linear":
            return Linear(self.linear_beta, self.total_steps())
        if self.strategy == "ema":
            return EMA(self.ema_alpha)
        return None

    def noise_spec(self):
        if self.noise == "symmetric":
            return Symmetric(self.noise_rate)
        if self.noise == "asymmetric":
            return Asymmetric(circular_map(range(self.n_classes)) if self.n_classes > 2 else ((0, 1),), self.noise_rate)
        if self.noise == "instance":
            return InstanceDependent(self.noise_rate, self.noise_projections, self.noise_seed)
        return Symmetric(0.0)

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_decay, tuple(self.lr_milestones))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name, value):
    default = ExperimentConfig.__dataclass_fields__[name]
    kind = type(default.default_factory() if default.default_factory is not dataclasses.MISSING else default.default)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is list and isinstance(value, list):
        return value
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in mapping.items()})


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    return config_from_mapping(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize to the flat TOML format accepted by :func:`load_config`."""
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, str):
            lines.append(f'{name} = "{v}"')
        elif isinstance(v, bool):
            lines.append(f"{name} = {'true' if v else 'false'}")
        elif isinstance(v, float):
            lines.append(f"{name} = {v!r}")
        else:
            lines.append(f"{name} = {v!r}")
    return "\n".join(lines) + "\n"
