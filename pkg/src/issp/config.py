"""Run configuration: nested dataclasses with JSON round-trip and presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .nn import ModelConfig
from .pruning import PruneConfig


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic: int = 24  # used when no manifest is given
    synth_size: int = 64
    data_seed: int = 0
    patch: int = 16
    batch: int = 16
    val_fraction: float = 0.25
    augment: bool = True
    antialias: bool = True


@dataclass
class ScheduleConfig:
    total_iters: int = 6000
    lr0: float = 2e-4
    half_every: int = 3000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    out_dir: str = "runs/default"
    seed: int = 42
    border_crop: int | None = None  # PSNR/SSIM shave; defaults to the scale

    @property
    def eval_border(self) -> int:
        return self.model.scale if self.border_crop is None else self.border_crop

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.prune.validate()
        s = self.schedule
        if s.total_iters != self.prune.k_p + self.prune.k_ft:
            raise ConfigError(f"K={s.total_iters} != k_p + k_ft = {self.prune.k_p} + {self.prune.k_ft}")
        if s.lr0 <= 0 or s.half_every < 1:
            raise ConfigError("lr0 must be > 0 and half_every >= 1")
        o = self.optim
        if not (0 < o.beta1 < 1 and 0 < o.beta2 < 1 and o.eps > 0):
            raise ConfigError(f"invalid optimizer settings {o}")
        d = self.data
        if d.patch < 1 or d.batch < 1 or not 0 <= d.val_fraction < 1:
            raise ConfigError(f"invalid data settings {d}")
        if d.manifest is None and (d.synthetic < 1 or d.synth_size < 16):
            raise ConfigError("synthetic data needs >= 1 image of size >= 16")
        if self.model.arch == "mini_mlp" and self.model.patch != d.patch:
            raise ConfigError("mini_mlp patch size must equal the data patch size")
        if self.border_crop is not None and self.border_crop < 0:
            raise ConfigError("border_crop must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"model": ModelConfig, "prune": PruneConfig, "optim": OptimConfig,
             "data": DataConfig, "schedule": ScheduleConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(unknown)}")
    return cls(**values)


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    top = {k: v for k, v in d.items() if k not in _SECTIONS}
    sections = {k: _build(cls, d.get(k, {}), k) for k, cls in _SECTIONS.items()}
    if "total_iters" not in d.get("schedule", {}):
        p = sections["prune"]
        sections["schedule"].total_iters = p.k_p + p.k_ft
    try:
        cfg = _build(RunConfig, {**top, **sections}, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(d).validate()


def preset(name: str) -> RunConfig:
    """``desk`` (the default) or ``full`` scale schedules."""
    cfg = RunConfig()
    if name == "desk":
        return cfg
    if name == "full":
        cfg.prune.k_p, cfg.prune.k_ft = 100_000, 400_000
        cfg.schedule = ScheduleConfig(total_iters=500_000, lr0=2e-4, half_every=250_000)
        cfg.data.batch, cfg.data.patch = 32, 64
        cfg.data.synth_size = 256
        cfg.model.patch = 64
        return cfg
    raise ConfigError(f"unknown preset {name!r}")
