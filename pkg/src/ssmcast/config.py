"""Run configuration: one JSON document with data/model/train/eval sections."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ssmcast import dssm
from ssmcast.data.simulate import SyntheticConfig
from ssmcast.pipelines.evaluate import EvalConfig
from ssmcast.pipelines.train import TrainConfig


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending JSON path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


Fraction = Field(ge=0.0, le=1.0)


class DataSection(_Section):
    n_patients: int = Field(100, ge=1)
    t_min: int = Field(96, ge=1)
    t_max: int = Field(96, ge=1)
    z_dim: int = Field(3, ge=1)
    o_dim: int = Field(6, ge=1)
    i_dim: int = Field(2, ge=1)
    family: Literal["linear", "nonlinear"] = "linear"
    params_seed: int = 0
    missingness: float | list[float] = 0.3
    intervention_sparsity: float = Field(0.0, ge=0.0, lt=1.0)
    episode_length: float = Field(12.0, ge=1.0)
    process_noise: float = Field(0.3, ge=0.0)
    obs_noise: float = Field(0.3, ge=0.0)
    int_noise: float = Field(0.3, ge=0.0)
    init_noise: float = Field(1.0, ge=0.0)
    spectral_radius: float = Field(0.9, gt=0.0)
    nonlinear_gain: float = Field(1.2, ge=0.0)
    grid_step: float = Field(1.0, gt=0.0)
    split_fractions: list[float] = Field(default_factory=lambda: [0.8, 0.1, 0.1], min_length=3, max_length=3)
    n_folds: int = Field(10, ge=1)
    obs_channels: list[str] | None = None  # channel dictionary; None = taken from the events
    int_channels: list[str] | None = None

    @field_validator("missingness")
    @classmethod
    def _rates(cls, v):
        rates = v if isinstance(v, list) else [v]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("missingness rates must lie in [0, 1]")
        return v

    @field_validator("split_fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not 0.0 <= f <= 1.0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("fractions must lie in [0, 1] and sum to 1")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if isinstance(self.missingness, list) and len(self.missingness) != self.o_dim:
            raise ValueError("missingness list needs one rate per observation channel")
        return self

    def synthetic(self) -> SyntheticConfig:
        keys = SyntheticConfig.__dataclass_fields__
        return SyntheticConfig(**{k: v for k, v in self.model_dump().items() if k in keys})


class ModelSection(_Section):
    z_dim: int = Field(3, ge=1)
    hidden: int = Field(32, ge=1)
    n_layers: int = Field(3, ge=1)
    lstm_hidden: int = Field(50, ge=1)
    combiner_hidden: int = Field(32, ge=1)
    combiner_layers: int = Field(2, ge=1)
    var_floor: float = Field(1e-6, gt=0.0)
    skip_initial_kl: bool = False

    def dssm_config(self, o_dim: int, i_dim: int) -> dssm.DssmConfig:
        return dssm.DssmConfig(o_dim=o_dim, i_dim=i_dim, **self.model_dump())


class TrainSection(_Section):
    strategy: Literal["si+tf", "tf", "hr", "kf"] = "si+tf"
    learning_rate: float = Field(1e-3, gt=0.0)
    finetune_learning_rate: float | None = Field(None, gt=0.0)
    batch_size: int = Field(16, ge=1)
    epochs_si: int = Field(50, ge=0)
    epochs_tf: int = Field(50, ge=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    seed: int = 0
    t_star: int | None = Field(None, ge=1)
    t_star_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    tau: int = Field(72, ge=1)
    patience: int = Field(10, ge=1)
    n_samples: int = Field(1, ge=1)
    eval_samples: int = Field(4, ge=1)
    freeze_phi: bool = False
    freeze_noise: bool = False
    grad_chunk: int = Field(0, ge=0)
    kf_iterations: int = Field(300, ge=1)
    kf_learning_rate: float = Field(0.02, gt=0.0)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class EvalSection(_Section):
    t_star: int = Field(48, ge=1)
    horizons: list[int] = Field(default_factory=lambda: [24, 48, 72], min_length=1)
    n_paths: int = Field(128, ge=1)
    seed: int = 0
    observed_only: bool = False
    denormalize: bool = False

    @field_validator("horizons")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("horizons must be >= 1")
        return v

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.model_dump())


class RunConfig(_Section):
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def override(self, section: str, **values) -> "RunConfig":
        """Scalar overrides from command-line flags (``None`` values are ignored)."""
        changes = {k: v for k, v in values.items() if v is not None}
        if not changes:
            return self
        merged = self.resolved()
        merged[section].update(changes)
        return parse_run_config(merged)


def _path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_run_config(obj) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(f"{_path(err['loc'])}: {err['msg']}") from None


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return parse_run_config(obj)
