"""Synthetic EMR-like event streams from a known state space system.

Interventions follow the state through a feedback policy and are given in
dosing episodes: while a channel is inactive the applied intervention is 0
and no event is emitted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ssmcast.data.preprocess import patient_seed
from ssmcast.data.records import INT, OBS, Event, EventStream
from ssmcast.lgssm import LgssmParams


@dataclass
class SyntheticConfig:
    n_patients: int = 100
    t_min: int = 96
    t_max: int = 96
    z_dim: int = 3
    o_dim: int = 6
    i_dim: int = 2
    family: str = "linear"  # "linear" | "nonlinear"
    params_seed: int = 0
    missingness: float | list[float] = 0.3
    intervention_sparsity: float = 0.0  # stationary fraction of inactive steps
    episode_length: float = 12.0  # mean active-episode length, steps
    process_noise: float = 0.3
    obs_noise: float = 0.3
    int_noise: float = 0.3
    init_noise: float = 1.0
    spectral_radius: float = 0.9  # linear family: rho(A + B D)
    nonlinear_gain: float = 1.2  # nonlinear family: largest eigenvalue of W
    grid_step: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("need 1 <= t_min <= t_max")
        if min(self.z_dim, self.o_dim, self.i_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.family not in ("linear", "nonlinear"):
            raise ValueError(f"unknown family {self.family!r}")
        rates = self.missingness_rates()
        if len(rates) != self.o_dim:
            raise ValueError("missingness list must have one rate per observation channel")
        if any(not 0.0 <= r <= 1.0 for r in rates) or not 0.0 <= self.intervention_sparsity < 1.0:
            raise ValueError("rates must lie in [0, 1]")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if min(self.process_noise, self.obs_noise, self.int_noise, self.init_noise) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.grid_step <= 0:
            raise ValueError("grid_step must be positive")

    def missingness_rates(self) -> list[float]:
        if isinstance(self.missingness, (int, float)):
            return [float(self.missingness)] * self.o_dim
        return [float(r) for r in self.missingness]

    def obs_channels(self) -> list[str]:
        return [f"obs_{k:02d}" for k in range(self.o_dim)]

    def int_channels(self) -> list[str]:
        return [f"int_{k:02d}" for k in range(self.i_dim)]

    @classmethod
    def mimic_like(cls, **overrides) -> "SyntheticConfig":
        """Channel counts of the ICU cohort: 96 observations, 8 drugs + 6 machine settings."""
        base = dict(o_dim=96, i_dim=14, z_dim=8, missingness=0.7, intervention_sparsity=0.6)
        base.update(overrides)
        return cls(**base)


@dataclass
class NonlinearParams:
    """``z_t = a z_{t-1} + tanh(W z_{t-1} + B u_t) + w``; ``x_t = C z_t + 0.5 tanh(G z_t) + v``;
    ``u_t = D tanh(z_{t-1}) + e``."""

    W: np.ndarray
    B: np.ndarray
    C: np.ndarray
    G: np.ndarray
    D: np.ndarray
    m0: np.ndarray
    leak: float = 0.6

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(getattr(self, k)) for k in ("W", "B", "C", "G", "D", "m0")} | {"leak": np.array([self.leak])}

    @classmethod
    def from_tensors(cls, t) -> "NonlinearParams":
        return cls(**{k: np.asarray(t[k]) for k in ("W", "B", "C", "G", "D", "m0")}, leak=float(np.asarray(t["leak"]).reshape(-1)[0]))


@dataclass
class GroundTruth:
    family: str
    params: LgssmParams | NonlinearParams
    trajectories: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"family": self.family, "params": {k: v.tolist() for k, v in self.params.to_tensors().items()}}


def true_params(config: SyntheticConfig) -> LgssmParams | NonlinearParams:
    rng = np.random.default_rng(config.params_seed)
    z, o, i = config.z_dim, config.o_dim, config.i_dim
    if config.family == "linear":
        A = rng.normal(size=(z, z))
        B = 0.5 * rng.normal(size=(z, i))
        D = 0.5 * rng.normal(size=(i, z))
        rho = max(abs(np.linalg.eigvals(A + B @ D)))
        scale = config.spectral_radius / rho
        return LgssmParams(
            A=A * scale, B=B * scale, C=rng.normal(size=(o, z)), D=D,
            Q=config.process_noise**2 * np.eye(z), R=config.obs_noise**2 * np.eye(o),
            U=config.int_noise**2 * np.eye(i), m0=np.zeros(z), P0=config.init_noise**2 * np.eye(z),
        )
    # symmetric recurrent weights with non-negative spectrum: the noiseless flow
    # settles on one of several fixed points and never cycles
    basis, _ = np.linalg.qr(rng.normal(size=(z, z)))
    W = (basis * np.linspace(config.nonlinear_gain, 0.0, z)) @ basis.T
    return NonlinearParams(
        W=W,
        B=0.5 * rng.normal(size=(z, i)),
        C=rng.normal(size=(o, z)),
        G=1.5 * rng.normal(size=(o, z)),
        D=0.5 * rng.normal(size=(i, z)),
        m0=0.5 * rng.normal(size=z),
    )


def _rollout(config: SyntheticConfig, params, T: int, rng: np.random.Generator):
    z_dim, o, i = config.z_dim, config.o_dim, config.i_dim
    z = np.zeros((T, z_dim))
    x = np.zeros((T, o))
    u = np.zeros((T, i))
    active = np.ones((T, i), dtype=bool)
    active[0] = False  # u_1 is a fixed zero vector
    s = config.intervention_sparsity
    if s > 0:
        p_stop = 1.0 / config.episode_length
        p_start = p_stop * (1.0 - s) / s
        state = rng.random(i) >= s
        for t in range(1, T):
            flip = rng.random(i)
            state = np.where(state, flip >= p_stop, flip < p_start)
            active[t] = state
    linear = isinstance(params, LgssmParams)
    z[0] = params.m0 + config.init_noise * rng.standard_normal(z_dim)
    for t in range(T):
        if t > 0:
            drive = params.D @ z[t - 1] if linear else params.D @ np.tanh(z[t - 1])
            u[t] = np.where(active[t], drive + config.int_noise * rng.standard_normal(i), 0.0)
            if linear:
                mean = params.A @ z[t - 1] + params.B @ u[t]
            else:
                mean = params.leak * z[t - 1] + np.tanh(params.W @ z[t - 1] + params.B @ u[t])
            z[t] = mean + config.process_noise * rng.standard_normal(z_dim)
        mean_x = params.C @ z[t] if linear else params.C @ z[t] + 0.5 * np.tanh(params.G @ z[t])
        x[t] = mean_x + config.obs_noise * rng.standard_normal(o)
    return x, u, z, active


def simulate(config: SyntheticConfig, seed: int) -> tuple[list[EventStream], GroundTruth]:
    """Sample patients and thin their trajectories into irregular events."""
    config.validate()
    params = true_params(config)
    rates = np.array(config.missingness_rates())
    obs_names, int_names = config.obs_channels(), config.int_channels()
    step = config.grid_step
    streams, truth = [], GroundTruth(config.family, params)
    for k in range(config.n_patients):
        pid = f"p{k:05d}"
        rng = np.random.default_rng(patient_seed(seed, pid))
        T = int(rng.integers(config.t_min, config.t_max + 1))
        x, u, z, active = _rollout(config, params, T, rng)
        events = []
        for t in range(T):
            keep = rng.random(config.o_dim) >= rates
            offsets = rng.random(config.o_dim + config.i_dim)
            for j in range(config.o_dim):
                if keep[j]:
                    events.append(Event(float((t + 1 - offsets[j]) * step), obs_names[j], float(x[t, j]), OBS))
            for j in range(config.i_dim):
                if active[t, j]:
                    events.append(Event(float((t + 1 - offsets[config.o_dim + j]) * step), int_names[j], float(u[t, j]), INT))
        events.sort(key=lambda e: e.time)
        streams.append(EventStream(pid, events))
        truth.trajectories[pid] = {"x": x, "u": u, "z": z, "active": active}
    return streams, truth


def config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
