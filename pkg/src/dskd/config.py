"""Run configuration: nested dataclasses loaded from YAML or JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion import ConfigError
from .guidance import ADAPTER_GRAD_MODES
from .losses import BIAS_MODES


@dataclass
class DatasetConfig:
    num_classes: int = 4
    train_per_class: int = 250
    test_per_class: int = 250
    height: int = 16
    width: int = 16
    channels: int = 1
    noise_sd: float = 0.1
    fraction: float = 1.0
    noise_ratio: float = 0.0


@dataclass
class NetConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32])
    convs_per_stage: int = 1


@dataclass
class ScheduleConfig:
    T: int = 2
    beta_min: float = 0.1
    beta_max: float = 0.3


@dataclass
class GuidanceSection:
    k: float = 1.0


@dataclass
class LossConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    tau: float = 4.0
    bias_mode: str = "gaussian"
    M: int = 256


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 32
    teacher_epochs: int = 10
    diffusion_warmup_epochs: int = 0


@dataclass
class SeedConfig:
    model: int = 0
    data: int = 0
    lsh: int = 0
    sampling: int = 0


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: NetConfig = field(default_factory=lambda: NetConfig(widths=[16, 32], convs_per_stage=2))
    student: NetConfig = field(default_factory=lambda: NetConfig(widths=[8, 16], convs_per_stage=1))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    adapter_grad: str = "through_blend"
    output_dir: str = "runs/default"
    checkpoint_every: int = 0

    def validate(self) -> "RunConfig":
        d, o, s, l = self.dataset, self.optimizer, self.schedule, self.losses
        checks = [
            (d.num_classes >= 2, "dataset.num_classes must be >= 2"),
            (d.train_per_class >= 1 and d.test_per_class >= 1, "dataset per-class counts must be >= 1"),
            (d.height >= 4 and d.width >= 4 and d.channels >= 1, "dataset image shape too small"),
            (d.noise_sd >= 0, "dataset.noise_sd must be >= 0"),
            (0 < d.fraction <= 1, "dataset.fraction must lie in (0, 1]"),
            (0 <= d.noise_ratio < 1, "dataset.noise_ratio must lie in [0, 1)"),
            (s.T >= 1, "schedule.T must be >= 1"),
            (0 < s.beta_min <= s.beta_max < 1, "need 0 < schedule.beta_min <= schedule.beta_max < 1"),
            (self.guidance.k >= 0, "guidance.k must be >= 0"),
            (l.alpha >= 0 and l.gamma >= 0 and l.tau > 0, "losses need alpha >= 0, gamma >= 0, tau > 0"),
            (l.bias_mode in BIAS_MODES, f"losses.bias_mode must be one of {BIAS_MODES}"),
            (l.M >= 1, "losses.M must be >= 1"),
            (o.lr >= 0 and 0 <= o.momentum < 1, "optimizer needs lr >= 0 and 0 <= momentum < 1"),
            (o.weight_decay >= 0, "optimizer.weight_decay must be >= 0"),
            (o.epochs >= 0 and o.teacher_epochs >= 0 and o.diffusion_warmup_epochs >= 0, "epoch counts must be >= 0"),
            (o.batch_size >= 1, "optimizer.batch_size must be >= 1"),
            (self.adapter_grad in ADAPTER_GRAD_MODES, f"adapter_grad must be one of {ADAPTER_GRAD_MODES}"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with overrides given as ``section__field=value`` or top-level names."""
        data = self.to_dict()
        for key, value in dotted.items():
            parts = key.split("__")
            node = data
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key.replace('__', '.')}")
            node[parts[-1]] = value
        return from_dict(data)


def _coerce(defaults, data: Any, where: str):
    cls = type(defaults)
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _coerce(default, value, path)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            kwargs[name] = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{path}: expected a list of integers")
            kwargs[name] = list(value)
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string")
            kwargs[name] = value
    return dataclasses.replace(defaults, **kwargs)


def from_dict(data: dict) -> RunConfig:
    return _coerce(RunConfig(), data, "").validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
