"""Versioned JSON checkpoints with base64 float64 tensors."""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssmcast import __version__, dssm, lgssm
from ssmcast import diffmath as dm
from ssmcast.data.io import dump_json
from ssmcast.data.records import NormalizationStats

FORMAT_VERSION = 1
MODEL_KINDS = ("lgssm", "dssm")


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class CheckpointEnvelope:
    strategy: str
    model_kind: str
    tensors: dict[str, np.ndarray]
    model_config: dict
    obs_channels: list[str]
    int_channels: list[str]
    normalization: NormalizationStats | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    tool_version: str = __version__

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise CheckpointError(f"unknown model kind {self.model_kind!r}")

    # model views -------------------------------------------------------

    def lgssm_params(self) -> lgssm.LgssmParams:
        if self.model_kind != "lgssm":
            raise CheckpointError("checkpoint does not hold a linear model")
        return lgssm.LgssmParams.from_tensors(self.tensors)

    def dssm_config(self) -> dssm.DssmConfig:
        if self.model_kind != "dssm":
            raise CheckpointError("checkpoint does not hold a deep model")
        return dssm.DssmConfig.from_json(self.model_config)

    def dssm_params(self) -> dm.ParameterSet:
        return dm.ParameterSet(self.tensors)

    def forecast(self, record, t_star: int, horizon: int, n_paths: int = 128, seed: int | None = None):
        """Forecast one normalised record with whichever model is stored."""
        if self.model_kind == "lgssm":
            return lgssm.kf_forecast(record, t_star, horizon, self.lgssm_params())
        return dssm.forecast(record, t_star, horizon, self.dssm_params(), self.dssm_config(),
                             n_paths=n_paths, seed=self.seed if seed is None else seed)

    # serialisation -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "tool_version": self.tool_version,
            "strategy": self.strategy,
            "model_kind": self.model_kind,
            "model_config": self.model_config,
            "obs_channels": list(self.obs_channels),
            "int_channels": list(self.int_channels),
            "normalization": None if self.normalization is None else self.normalization.to_json(),
            "config": self.config,
            "seed": self.seed,
            "meta": self.meta,
            "tensors": {k: encode_tensor(v) for k, v in sorted(self.tensors.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CheckpointEnvelope":
        if not isinstance(obj, dict) or "format_version" not in obj:
            raise CheckpointError("not a checkpoint (missing format_version)")
        if obj["format_version"] != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported checkpoint format_version {obj['format_version']!r} (this tool reads {FORMAT_VERSION})"
            )
        try:
            tensors = {k: decode_tensor(k, v) for k, v in obj["tensors"].items()}
            norm = obj.get("normalization")
            env = cls(
                strategy=obj["strategy"], model_kind=obj["model_kind"], tensors=tensors,
                model_config=obj["model_config"], obs_channels=list(obj["obs_channels"]),
                int_channels=list(obj["int_channels"]),
                normalization=None if norm is None else NormalizationStats.from_json(norm),
                config=obj.get("config", {}), seed=int(obj.get("seed", 0)), meta=obj.get("meta", {}),
                format_version=obj["format_version"], tool_version=obj.get("tool_version", ""),
            )
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing field {exc.args[0]!r}") from None
        env.validate()
        return env

    def validate(self) -> None:
        if self.model_kind == "dssm":
            try:
                dssm.check_params(self.tensors, self.dssm_config())
            except lgssm.DimensionError as exc:
                raise CheckpointError(f"tensor shape mismatch: {exc}") from None
        else:
            try:
                self.lgssm_params()
            except (ValueError, KeyError, TypeError) as exc:
                raise CheckpointError(f"invalid linear model tensors: {exc}") from None


def encode_tensor(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(name: str, entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, binascii.Error):
            raise CheckpointError(f"tensor '{name}': corrupt base64 data") from None
        raise CheckpointError(f"tensor '{name}': malformed entry") from None
    if entry.get("dtype", "float64") != "float64":
        raise CheckpointError(f"tensor '{name}': unsupported dtype {entry.get('dtype')!r}")
    if any(s < 0 for s in shape) or len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor '{name}': shape {list(shape)} does not match {len(raw) // 8} stored values")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_text(env: CheckpointEnvelope) -> str:
    return dump_json(env.to_json())


def save_checkpoint(path, env: CheckpointEnvelope) -> None:
    Path(path).write_text(checkpoint_text(env), encoding="utf-8")


def load_checkpoint(path) -> CheckpointEnvelope:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON ({exc.msg})") from None
    return CheckpointEnvelope.from_json(obj)
