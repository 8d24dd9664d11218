from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

OBS = "obs"
INT = "int"
KINDS = (OBS, INT)


class DataFormatError(ValueError):
    """Malformed input data; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownChannelError(DataFormatError):
    def __init__(self, channels, patient_id: str = ""):
        self.channels = sorted(set(channels))
        who = f" (patient {patient_id})" if patient_id else ""
        super().__init__(f"unknown channel(s){who}: {', '.join(self.channels)}")


class Event(NamedTuple):
    time: float  # hours since admission
    channel: str
    value: float
    kind: str  # "obs" | "int"


@dataclass
class EventStream:
    patient_id: str
    events: list[Event] = field(default_factory=list)
    static_context: dict | None = None


@dataclass
class PatientRecord:
    """Gridded record; cells with a false mask are NaN until imputed."""

    patient_id: str
    x: np.ndarray  # (T, O)
    x_mask: np.ndarray  # (T, O) bool, true = observed
    u: np.ndarray  # (T, I)
    u_mask: np.ndarray  # (T, I) bool
    obs_channels: list[str]
    int_channels: list[str]
    grid_step: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.x_mask = np.asarray(self.x_mask, dtype=bool)
        self.u_mask = np.asarray(self.u_mask, dtype=bool)
        T = self.x.shape[0]
        if self.x.shape != (T, len(self.obs_channels)) or self.x_mask.shape != self.x.shape:
            raise DataFormatError(f"record {self.patient_id}: observation shapes are inconsistent")
        if self.u.shape != (T, len(self.int_channels)) or self.u_mask.shape != self.u.shape:
            raise DataFormatError(f"record {self.patient_id}: intervention shapes are inconsistent")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u)))

    def with_arrays(self, **changes) -> "PatientRecord":
        return replace(self, **changes)

    def truncated(self, t_end: int) -> "PatientRecord":
        return replace(
            self, x=self.x[:t_end].copy(), x_mask=self.x_mask[:t_end].copy(),
            u=self.u[:t_end].copy(), u_mask=self.u_mask[:t_end].copy(),
        )

    def equals(self, other: "PatientRecord") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.obs_channels == other.obs_channels
            and self.int_channels == other.int_channels
            and self.grid_step == other.grid_step
            and np.array_equal(self.x, other.x, equal_nan=True)
            and np.array_equal(self.u, other.u, equal_nan=True)
            and np.array_equal(self.x_mask, other.x_mask)
            and np.array_equal(self.u_mask, other.u_mask)
        )


@dataclass
class NormalizationStats:
    obs_channels: list[str]
    obs_mean: np.ndarray
    obs_std: np.ndarray
    int_channels: list[str]
    int_mean: np.ndarray
    int_std: np.ndarray

    def to_json(self) -> dict:
        return {
            "obs_channels": list(self.obs_channels),
            "int_channels": list(self.int_channels),
            "obs": {c: {"mean": float(m), "std": float(s)} for c, m, s in zip(self.obs_channels, self.obs_mean, self.obs_std)},
            "int": {c: {"mean": float(m), "std": float(s)} for c, m, s in zip(self.int_channels, self.int_mean, self.int_std)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        def part(key):
            chans = list(obj.get(f"{key}_channels", obj[key]))
            return (
                chans,
                np.array([obj[key][c]["mean"] for c in chans], dtype=np.float64),
                np.array([obj[key][c]["std"] for c in chans], dtype=np.float64),
            )

        oc, om, os_ = part("obs")
        ic, im, is_ = part("int")
        return cls(oc, om, os_, ic, im, is_)

    @classmethod
    def identity(cls, obs_channels, int_channels) -> "NormalizationStats":
        return cls(
            list(obs_channels), np.zeros(len(obs_channels)), np.ones(len(obs_channels)),
            list(int_channels), np.zeros(len(int_channels)), np.ones(len(int_channels)),
        )
