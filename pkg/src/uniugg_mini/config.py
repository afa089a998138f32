"""Run configuration: nested dataclasses loaded from one JSON document."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass
from pathlib import Path

from .conditioner import ConditionerConfig
from .diffusion import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .geometry import SceneConfig
from .spatial_decoder import DecoderConfig
from .spatial_vae import VAEConfig

STAGES = ("encoder_pretrain", "vae", "unified_s1", "unified_s2", "unified_s3")

# learning rates of the large-scale unified stages, kept for reference
FULL_SCALE_STAGE1_LR = 1e-3
FULL_SCALE_STAGE23_LR = 2e-5
FULL_SCALE_BATCH_SIZE = 256


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-3
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    batch_size: int = 8
    total_steps: int = 1500
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.9
    beta: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    gamma: float = 1e-4
    alpha_conf: float = 0.2
    tau: float = 0.07
    kd_fraction: float = 0.5
    lambda_kd: float = 1.0
    lambda_gen: float = 1.0
    lambda_vqa: float = 1.0


@dataclass(frozen=True)
class DatasetConfig:
    n_pairs: int = 8
    first_seed: int = 0
    data_dir: str | None = None
    scene: SceneConfig = SceneConfig()


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    vae: VAEConfig = VAEConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    conditioner: ConditionerConfig = ConditionerConfig()
    schedule: ScheduleConfig = ScheduleConfig()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stage: str = "encoder_pretrain"
    out_dir: str = "runs/default"
    init_ckpt: str | None = None
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    loss: LossWeights = LossWeights()
    dataset: DatasetConfig = DatasetConfig()
    qa_per_pair: int = 1
    gen_self_pairs: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        o = self.optim
        if not 0 <= o.warmup_ratio < 1:
            raise ConfigurationError("warmup_ratio must be in [0, 1)")
        if o.batch_size < 1 or o.total_steps < 1:
            raise ConfigurationError("batch_size and total_steps must be >= 1")
        if o.base_lr < 0 or o.weight_decay < 0:
            raise ConfigurationError("base_lr and weight_decay must be >= 0")
        for name, value in asdict(self.loss).items():
            if value < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.dataset.n_pairs < 1:
            raise ConfigurationError("dataset.n_pairs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config")

    def override(self, updates: dict) -> "RunConfig":
        """A copy with ``updates`` (nested dict, or dotted keys) merged in."""
        merged = self.to_dict()
        for key, value in updates.items():
            if isinstance(value, dict) and "." not in key:
                _merge(merged, {key: value})
                continue
            node = merged
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigurationError(f"unknown config key {key!r}")
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.from_dict(merged)


def _merge(base: dict, updates: dict) -> None:
    for k, v in updates.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, f"{where}.{key}")
        elif typing.get_origin(tp) is tuple:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig.from_dict(data)
    return cfg.override(overrides) if overrides else cfg


def default_stage_config(stage: str, **updates) -> RunConfig:
    """Desk-scale defaults per stage."""
    steps = {"encoder_pretrain": 1500, "vae": 600, "unified_s1": 200, "unified_s2": 1500, "unified_s3": 400}
    lrs = {"encoder_pretrain": 1e-3, "vae": 1e-3, "unified_s1": FULL_SCALE_STAGE1_LR, "unified_s2": 1e-3,
           "unified_s3": 3e-4}
    cfg = RunConfig(stage=stage, optim=OptimConfig(base_lr=lrs[stage], total_steps=steps[stage]))
    return cfg.override(updates) if updates else cfg


__all__ = [
    "STAGES", "FULL_SCALE_STAGE1_LR", "FULL_SCALE_STAGE23_LR", "FULL_SCALE_BATCH_SIZE", "OptimConfig", "LossWeights",
    "DatasetConfig", "ScheduleConfig", "ModelConfig", "RunConfig", "load_config", "default_stage_config",
]
