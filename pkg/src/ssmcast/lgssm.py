"""Linear-Gaussian state space model with intervention feedback.

The generative process for one record of length ``T``::

    z_1 ~ N(m0, P0)
    u_t ~ N(D z_{t-1}, U)               t >= 2   (u_1 is a fixed zero vector)
    z_t ~ N(A z_{t-1} + B u_t, Q)       t >= 2
    x_t ~ N(C z_t, R)                   t >= 1

Everything is jointly Gaussian, so filtering, likelihoods and forecasts are
exact.  It is used as the KF baseline and as the oracle for the deep model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ssmcast import diffmath as dm
from ssmcast._backend import KernelLinAlgError, kernels

log = logging.getLogger(__name__)

_COV_NAMES = ("Q", "R", "U", "P0")
PARAM_NAMES = ("A", "B", "C", "D", "Q", "R", "U", "m0", "P0")


class DimensionError(ValueError):
    pass


class KalmanNumericalError(ArithmeticError):
    def __init__(self, message: str, t: int | None = None):
        self.t = t
        super().__init__(message)


@dataclass(frozen=True)
class LgssmParams:
    A: np.ndarray  # (z, z)
    B: np.ndarray  # (z, i)
    C: np.ndarray  # (o, z)
    D: np.ndarray  # (i, z)
    Q: np.ndarray  # (z, z)
    R: np.ndarray  # (o, o)
    U: np.ndarray  # (i, i)
    m0: np.ndarray  # (z,)
    P0: np.ndarray  # (z, z)

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def z_dim(self) -> int:
        return self.A.shape[0]

    @property
    def o_dim(self) -> int:
        return self.C.shape[0]

    @property
    def i_dim(self) -> int:
        return self.D.shape[0]

    def validate(self) -> None:
        z, o, i = self.A.shape[0], self.C.shape[0], self.D.shape[0]
        expected = {
            "A": (z, z), "B": (z, i), "C": (o, z), "D": (i, z),
            "Q": (z, z), "R": (o, o), "U": (i, i), "m0": (z,), "P0": (z, z),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        for name in _COV_NAMES:
            S = getattr(self, name)
            if not np.allclose(S, S.T, atol=1e-10, rtol=1e-10):
                raise ValueError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(S + 1e-9 * np.eye(S.shape[0]))
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} is not positive semi-definite") from None

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {name: np.array(getattr(self, name)) for name in PARAM_NAMES}

    @classmethod
    def from_tensors(cls, tensors) -> "LgssmParams":
        return cls(**{name: np.asarray(tensors[name]) for name in PARAM_NAMES})

    @classmethod
    def random(cls, z: int, o: int, i: int, seed: int, noise: float = 0.3, spectral: float = 0.9) -> "LgssmParams":
        """A random stable system; used by tests and the simulator."""
        rng = np.random.default_rng(seed)

        def spd(k, scale):
            M = rng.normal(size=(k, k))
            return scale * (M @ M.T / k + 0.5 * np.eye(k))

        A = rng.normal(size=(z, z))
        B = 0.5 * rng.normal(size=(z, i))
        D = 0.5 * rng.normal(size=(i, z))
        F = A + B @ D
        rho = max(abs(np.linalg.eigvals(F)))
        A = A * spectral / rho
        B = B * spectral / rho
        return cls(
            A=A, B=B, C=rng.normal(size=(o, z)), D=D,
            Q=spd(z, noise), R=spd(o, noise), U=spd(i, noise),
            m0=rng.normal(size=z), P0=spd(z, 1.0),
        )


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ForecastResult:
    """Per-step predictive moments for steps ``t_star+1 .. t_star+H``."""

    t_star: int
    obs_mean: np.ndarray  # (H, o)
    obs_var: np.ndarray  # (H, o)
    int_mean: np.ndarray  # (H, i)
    int_var: np.ndarray  # (H, i)
    patient_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.obs_mean.shape[0]

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "t_star": self.t_star,
            "horizon": self.horizon,
            "obs_mean": self.obs_mean.tolist(),
            "obs_var": self.obs_var.tolist(),
            "int_mean": self.int_mean.tolist(),
            "int_var": self.int_var.tolist(),
            **({"meta": self.meta} if self.meta else {}),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForecastResult":
        def arr(key):
            a = np.asarray(obj[key], dtype=np.float64)
            return a.reshape(obj["horizon"], -1) if a.size else a.reshape(obj["horizon"], 0)

        return cls(
            t_star=int(obj["t_star"]),
            obs_mean=arr("obs_mean"), obs_var=arr("obs_var"),
            int_mean=arr("int_mean"), int_var=arr("int_var"),
            patient_id=obj.get("patient_id", ""), meta=obj.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def _check_vec(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise DimensionError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def _symmetrize(P):
    return 0.5 * (P + P.T)


def kf_step_predict(belief: GaussianBelief, u, params: LgssmParams) -> GaussianBelief:
    """Propagate ``belief`` through the transition with control ``u``."""
    m = _check_vec(belief.mean, params.z_dim, "belief mean")
    u = _check_vec(u, params.i_dim, "u")
    mean = params.A @ m + params.B @ u
    cov = params.A @ belief.cov @ params.A.T + params.Q
    return GaussianBelief(mean, _symmetrize(cov))


def _condition(belief: GaussianBelief, y, H, noise, t=None, what="innovation"):
    P = belief.cov
    S = _symmetrize(H @ P @ H.T + noise)
    try:
        L = dm.cholesky_jitter(S)
    except np.linalg.LinAlgError:
        where = f" at t={t}" if t is not None else ""
        raise KalmanNumericalError(f"{what} covariance is singular{where}", t) from None
    resid = y - H @ belief.mean
    w = np.linalg.solve(L, resid)
    ll = -0.5 * (len(y) * dm.LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + w @ w)
    PHt = P @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    mean = belief.mean + K @ resid
    cov = _symmetrize(P - K @ PHt.T)
    return GaussianBelief(mean, cov), float(ll)


def kf_step_update(prior: GaussianBelief, x, params: LgssmParams, t: int | None = None):
    """Condition ``prior`` on observation ``x``; returns ``(posterior, log N(x; C m, S))``."""
    x = _check_vec(x, params.o_dim, "x")
    return _condition(prior, x, params.C, params.R, t)


def kf_step_intervention(belief: GaussianBelief, u_next, params: LgssmParams, t: int | None = None):
    """Condition the belief over ``z_t`` on the next intervention ``u_{t+1}``."""
    u_next = _check_vec(u_next, params.i_dim, "u")
    return _condition(belief, u_next, params.D, params.U, t, what="intervention")


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def _record_arrays(record, params: LgssmParams):
    x = np.asarray(record.x, dtype=np.float64)
    u = np.asarray(record.u, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.o_dim:
        raise DimensionError(f"x has shape {x.shape}, expected (T, {params.o_dim})")
    if u.shape != (x.shape[0], params.i_dim):
        raise DimensionError(f"u has shape {u.shape}, expected ({x.shape[0]}, {params.i_dim})")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("record must be fully imputed before filtering")
    return x, u


def filter_batch(x, u, lengths, params: LgssmParams, include_interventions: bool = True):
    """Run the compiled/vectorised filter over padded ``(N, T, .)`` arrays."""
    try:
        return kernels.kalman_filter(
            params.A, params.B, params.C, params.D, params.Q, params.R, params.U,
            params.m0, params.P0, x, u, lengths, include_interventions,
        )
    except KernelLinAlgError as exc:
        raise KalmanNumericalError(str(exc), exc.t) from None


def kf_filter(record, params: LgssmParams, include_interventions: bool = True):
    """Filtered beliefs ``p(z_t | x_{1:t}, u_{1:t})`` and the total log-likelihood.

    With ``include_interventions`` the total is ``log p(x_{1:T}, u_{2:T})``;
    without it interventions are treated as exogenous controls and the total
    is the observation likelihood given them.
    """
    x, u = _record_arrays(record, params)
    T = x.shape[0]
    total, means, covs, _, _ = filter_batch(x[None], u[None], [T], params, include_interventions)
    beliefs = [GaussianBelief(means[0, t], covs[t]) for t in range(T)]
    return beliefs, float(total[0])


def kf_loglik_terms(record, params: LgssmParams, include_interventions: bool = True):
    """Per-step ``(obs_ll[T], int_ll[T])``; ``int_ll[t]`` scores ``u_t`` given the past."""
    x, u = _record_arrays(record, params)
    _, _, _, obs_ll, int_ll = filter_batch(x[None], u[None], [x.shape[0]], params, include_interventions)
    return obs_ll[0], int_ll[0]


def sample_trajectory(params: LgssmParams, T: int, rng: np.random.Generator):
    """Draw ``(x[T,o], u[T,i], z[T,z])`` from the generative process."""
    def draw(mean, cov):
        return mean + dm.cholesky_jitter(cov) @ rng.standard_normal(len(mean))

    x = np.zeros((T, params.o_dim))
    u = np.zeros((T, params.i_dim))
    z = np.zeros((T, params.z_dim))
    z[0] = draw(params.m0, params.P0)
    for t in range(T):
        if t > 0:
            u[t] = draw(params.D @ z[t - 1], params.U)
            z[t] = draw(params.A @ z[t - 1] + params.B @ u[t], params.Q)
        x[t] = draw(params.C @ z[t], params.R)
    return x, u, z


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

MAX_BRUTE_FORCE_T = 6


@dataclass
class JointGaussian:
    mean: np.ndarray
    cov: np.ndarray
    labels: list[tuple[str, int, int]]  # (series, time 1-based, channel)

    def index(self, series: str, t: int) -> list[int]:
        return [k for k, (s, tt, _) in enumerate(self.labels) if s == series and tt == t]

    def logpdf(self, values) -> float:
        values = np.asarray(values, dtype=np.float64)
        L = dm.cholesky_jitter(self.cov)
        w = np.linalg.solve(L, values - self.mean)
        return float(-0.5 * (len(values) * dm.LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + w @ w))

    def condition(self, observed: list[int], values) -> "JointGaussian":
        """Gaussian conditional of the remaining coordinates given ``observed``."""
        values = np.asarray(values, dtype=np.float64)
        rest = [k for k in range(len(self.mean)) if k not in set(observed)]
        S_oo = self.cov[np.ix_(observed, observed)]
        S_ro = self.cov[np.ix_(rest, observed)]
        gain = np.linalg.solve(S_oo, S_ro.T).T
        mean = self.mean[rest] + gain @ (values - self.mean[observed])
        cov = self.cov[np.ix_(rest, rest)] - gain @ S_ro.T
        return JointGaussian(mean, 0.5 * (cov + cov.T), [self.labels[k] for k in rest])

    def marginal(self, keep: list[int]) -> "JointGaussian":
        return JointGaussian(self.mean[keep], self.cov[np.ix_(keep, keep)], [self.labels[k] for k in keep])


def brute_force_joint(T: int, params: LgssmParams) -> JointGaussian:
    """Exact moments of the stacked ``(x_1..x_T, u_2..u_T)`` vector.

    Every variable is written as an affine map of independent noise blocks
    ``(z_1 - m0, w_u_t, w_q_t, v_t)``; the moments then follow directly.
    Works for singular noise covariances.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if T > MAX_BRUTE_FORCE_T:
        raise ValueError(f"brute_force_joint refuses T={T} > {MAX_BRUTE_FORCE_T}")
    z, o, i = params.z_dim, params.o_dim, params.i_dim
    blocks = [params.P0]
    for _ in range(2, T + 1):
        blocks += [params.U, params.Q]
    blocks += [params.R] * T
    sizes = [b.shape[0] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_noise = int(offsets[-1])
    cov_noise = np.zeros((n_noise, n_noise))
    for k, b in enumerate(blocks):
        cov_noise[offsets[k]:offsets[k + 1], offsets[k]:offsets[k + 1]] = b

    def selector(k):
        E = np.zeros((sizes[k], n_noise))
        E[:, offsets[k]:offsets[k + 1]] = np.eye(sizes[k])
        return E

    v_block = 1 + 2 * (T - 1)
    z_mean, z_map = params.m0.copy(), selector(0)
    x_means, x_maps, u_means, u_maps = [], [], [], []
    for t in range(1, T + 1):
        if t >= 2:
            wu, wq = selector(1 + 2 * (t - 2)), selector(2 + 2 * (t - 2))
            u_mean = params.D @ z_mean
            u_map = params.D @ z_map + wu
            u_means.append(u_mean)
            u_maps.append(u_map)
            z_mean = params.A @ z_mean + params.B @ u_mean
            z_map = params.A @ z_map + params.B @ u_map + wq
        x_means.append(params.C @ z_mean)
        x_maps.append(params.C @ z_map + selector(v_block + t - 1))
    mean = np.concatenate(x_means + u_means)
    M = np.vstack(x_maps + u_maps)
    labels = [("x", t, j) for t in range(1, T + 1) for j in range(o)]
    labels += [("u", t, j) for t in range(2, T + 1) for j in range(i)]
    cov = M @ cov_noise @ M.T
    return JointGaussian(mean, 0.5 * (cov + cov.T), labels)


def stack_observed(x, u) -> np.ndarray:
    """Data vector in :func:`brute_force_joint` order."""
    x = np.asarray(x)
    u = np.asarray(u)
    return np.concatenate([x.reshape(-1), u[1:].reshape(-1)])


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------


def forecast_from_belief(belief: GaussianBelief, horizon: int, params: LgssmParams, t_star: int = 0) -> ForecastResult:
    """Roll the filtered belief at ``t_star`` forward with intervention feedback.

    The next intervention is Gaussian given ``z_t``; marginalising it out of
    the augmented ``(z_t, u_{t+1})`` Gaussian gives the state transition
    ``F = A + B D`` with extra noise ``B U B^T``.
    """
    A, B, C, D = params.A, params.B, params.C, params.D
    F = A + B @ D
    extra = B @ params.U @ B.T + params.Q
    m, P = np.array(belief.mean), np.array(belief.cov)
    obs_mean = np.zeros((horizon, params.o_dim))
    obs_var = np.zeros_like(obs_mean)
    int_mean = np.zeros((horizon, params.i_dim))
    int_var = np.zeros_like(int_mean)
    for k in range(horizon):
        int_mean[k] = D @ m
        int_var[k] = np.diag(D @ P @ D.T + params.U)
        m = F @ m
        P = _symmetrize(F @ P @ F.T + extra)
        obs_mean[k] = C @ m
        obs_var[k] = np.diag(C @ P @ C.T + params.R)
    return ForecastResult(t_star, obs_mean, obs_var, int_mean, np.maximum(int_var, 0.0))


def kf_forecast(record, t_star: int, horizon: int, params: LgssmParams) -> ForecastResult:
    """Filter on steps ``1..t_star`` then forecast ``horizon`` steps of x and u."""
    x, u = _record_arrays(record, params)
    if not 1 <= t_star <= x.shape[0]:
        raise ValueError(f"t_star={t_star} outside record of length {x.shape[0]}")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    total, means, covs, _, _ = filter_batch(x[None, :t_star], u[None, :t_star], [t_star], params, True)
    belief = GaussianBelief(means[0, t_star - 1], covs[t_star - 1])
    result = forecast_from_belief(belief, horizon, params, t_star)
    result.patient_id = getattr(record, "patient_id", "")
    return result


# ---------------------------------------------------------------------------
# Differentiable filter and maximum-likelihood fitting
# ---------------------------------------------------------------------------


def _tril_mask(n):
    return np.tril(np.ones((n, n)))


def covariance_from_factor(L, floor: float):
    """``tril(L) tril(L)^T + floor * I``; traced or eager."""
    n = dm.value_of(L).shape[0]
    low = dm.mul(L, _tril_mask(n))
    return dm.add(dm.matmul(low, dm.transpose(low)), floor * np.eye(n))


def traced_loglik(p, x, u, include_interventions: bool, floor: float):
    """Sum over records of the filter log-likelihood, written in diffmath primitives.

    ``p`` maps A, B, C, D, m0 and the factors Lq, Lr, Lu, Lp0 to tensors;
    ``x``/``u`` are ``(N, T, .)`` arrays of equal-length records.
    """
    A, B, C, D = p["A"], p["B"], p["C"], p["D"]
    Q = covariance_from_factor(p["Lq"], floor)
    R = covariance_from_factor(p["Lr"], floor)
    U = covariance_from_factor(p["Lu"], floor)
    P = covariance_from_factor(p["Lp0"], floor)
    n, T, o = x.shape
    i = u.shape[2]
    m = dm.broadcast(dm.reshape(p["m0"], (1, -1)), (n, dm.value_of(p["m0"]).shape[0]))
    total = 0.0

    def condition(m, P, y, H, noise, k):
        S = dm.add(dm.matmul(dm.matmul(H, P), dm.transpose(H)), noise)
        S = dm.mul(0.5, dm.add(S, dm.transpose(S)))
        resid = dm.sub(y, dm.matmul(m, dm.transpose(H)))
        sol = dm.solve(S, dm.transpose(resid))  # (k, n)
        quad = dm.sum_(dm.mul(dm.transpose(resid), sol))
        ll = dm.mul(-0.5, dm.add(dm.mul(float(n), dm.logdet(S)), quad))
        ll = dm.sub(ll, 0.5 * n * k * dm.LOG_2PI)
        PHt = dm.matmul(P, dm.transpose(H))
        m = dm.add(m, dm.matmul(dm.transpose(sol), dm.transpose(PHt)))
        P = dm.sub(P, dm.matmul(PHt, dm.solve(S, dm.transpose(PHt))))
        P = dm.mul(0.5, dm.add(P, dm.transpose(P)))
        return m, P, ll

    for t in range(T):
        if t > 0:
            if include_interventions:
                m, P, ll = condition(m, P, u[:, t, :], D, U, i)
                total = dm.add(total, ll)
            m = dm.add(dm.matmul(m, dm.transpose(A)), dm.matmul(u[:, t, :], dm.transpose(B)))
            P = dm.add(dm.matmul(dm.matmul(A, P), dm.transpose(A)), Q)
        m, P, ll = condition(m, P, x[:, t, :], C, R, o)
        total = dm.add(total, ll)
    return total


@dataclass
class LgssmFitConfig:
    z_dim: int = 3
    iterations: int = 300
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    cov_floor: float = 1e-4
    include_interventions: bool = True
    backoff: float = 0.5
    max_backoffs: int = 8
    patience: int = 10
    seed: int = 0
    tol: float = 1e-9


@dataclass
class FitHistory:
    train_loss: list[float] = field(default_factory=list)
    eval_loglik: list[float] = field(default_factory=list)
    step_scale: list[float] = field(default_factory=list)
    best_iteration: int = 0


def _group_by_length(records):
    groups: dict[int, list] = {}
    for r in records:
        groups.setdefault(np.asarray(r.x).shape[0], []).append(r)
    out = []
    for T in sorted(groups):
        rs = groups[T]
        out.append((np.stack([np.asarray(r.x, float) for r in rs]), np.stack([np.asarray(r.u, float) for r in rs])))
    return out


def raw_to_params(raw, floor: float) -> LgssmParams:
    covs = {k: np.asarray(covariance_from_factor(raw[f], floor)) for k, f in
            (("Q", "Lq"), ("R", "Lr"), ("U", "Lu"), ("P0", "Lp0"))}
    return LgssmParams(A=raw["A"], B=raw["B"], C=raw["C"], D=raw["D"], m0=raw["m0"], **covs)


def params_to_raw(params: LgssmParams, floor: float) -> dm.ParameterSet:
    def factor(S):
        n = S.shape[0]
        target = S - floor * np.eye(n)
        w, V = np.linalg.eigh(0.5 * (target + target.T))
        target = (V * np.maximum(w, 1e-10)) @ V.T
        return np.linalg.cholesky(target + 1e-12 * np.eye(n))

    return dm.ParameterSet({
        "A": params.A, "B": params.B, "C": params.C, "D": params.D, "m0": params.m0,
        "Lq": factor(params.Q), "Lr": factor(params.R), "Lu": factor(params.U), "Lp0": factor(params.P0),
    })


def init_lgssm(records, z_dim: int, seed: int = 0, floor: float = 1e-4) -> LgssmParams:
    """Principal-component initialisation of the emission, near-identity dynamics."""
    rng = np.random.default_rng(seed)
    X = np.concatenate([np.asarray(r.x, float) for r in records])
    Uall = np.concatenate([np.asarray(r.u, float) for r in records])
    o, i = X.shape[1], Uall.shape[1]
    cov = np.cov(X.T).reshape(o, o) + 1e-6 * np.eye(o)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    k = min(z_dim, o)
    C = np.zeros((o, z_dim))
    C[:, :k] = V[:, order[:k]] * np.sqrt(w[order[:k]])
    C += 0.01 * rng.normal(size=C.shape)
    resid = max(float(np.mean(w[order[k:]])) if o > k else 0.1, 0.05)
    u_var = np.var(Uall, axis=0) + 0.05 if len(Uall) else np.ones(i)
    return LgssmParams(
        A=0.9 * np.eye(z_dim) + 0.01 * rng.normal(size=(z_dim, z_dim)),
        B=0.01 * rng.normal(size=(z_dim, i)),
        C=C,
        D=0.01 * rng.normal(size=(i, z_dim)),
        Q=0.1 * np.eye(z_dim),
        R=resid * np.eye(o),
        U=np.diag(u_var),
        m0=np.zeros(z_dim),
        P0=np.eye(z_dim),
    )


def mean_loglik(params: LgssmParams, records, include_interventions: bool = True) -> float:
    """Average per-record joint log-likelihood (compiled filter)."""
    if not records:
        return float("nan")
    total = 0.0
    for x, u in _group_by_length(records):
        ll, *_ = filter_batch(x, u, np.full(x.shape[0], x.shape[1]), params, include_interventions)
        total += float(np.sum(ll))
    return total / len(records)


def fit_lgssm(records, config: LgssmFitConfig | None = None, eval_records=None,
              init: LgssmParams | None = None):
    """Maximum-likelihood fit by Adam through the differentiable filter.

    Every accepted step must not increase the training loss; otherwise the
    step is shrunk by ``config.backoff`` and retried.  With ``eval_records``
    the best-eval iterate is returned and training stops after ``patience``
    iterations without improvement.
    """
    config = config or LgssmFitConfig()
    if not records:
        raise ValueError("fit_lgssm needs at least one record")
    floor = config.cov_floor
    groups = _group_by_length(records)
    n_cells = sum(x.shape[0] * x.shape[1] for x, _ in groups)
    init = init or init_lgssm(records, config.z_dim, config.seed, floor)
    raw = params_to_raw(init, floor)

    def objective(p):
        total = 0.0
        for x, u in groups:
            total = dm.add(total, traced_loglik(p, x, u, config.include_interventions, floor))
        return dm.mul(-1.0 / n_cells, total)

    def loss_of(raw_params) -> float:
        try:
            params = raw_to_params(raw_params, floor)
            return -mean_loglik(params, records, config.include_interventions) * len(records) / n_cells
        except (KalmanNumericalError, ValueError, np.linalg.LinAlgError):
            return math.inf

    names = list(raw)
    m1 = {k: np.zeros_like(raw[k]) for k in names}
    m2 = {k: np.zeros_like(raw[k]) for k in names}
    history = FitHistory()
    best_raw, best_eval, stale = raw, -math.inf, 0
    scale = 1.0
    current = loss_of(raw)
    if not math.isfinite(current):
        raise KalmanNumericalError("initial parameters give a non-finite likelihood")
    for it in range(1, config.iterations + 1):
        value, grad = dm.value_and_gradient(objective, raw)
        if not math.isfinite(value):
            raise KalmanNumericalError(f"non-finite training loss at iteration {it}")
        gnorm = math.sqrt(sum(float(np.sum(grad[k] ** 2)) for k in names))
        clip = min(1.0, config.clip_norm / gnorm) if gnorm > 0 else 1.0
        for k in names:
            g = grad[k] * clip
            m1[k] = config.beta1 * m1[k] + (1 - config.beta1) * g
            m2[k] = config.beta2 * m2[k] + (1 - config.beta2) * g * g
        c1, c2 = 1 - config.beta1 ** it, 1 - config.beta2 ** it
        accepted = False
        for _ in range(config.max_backoffs + 1):
            lr = config.learning_rate * scale
            cand = dm.ParameterSet({
                k: raw[k] - lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + config.eps) for k in names
            })
            cand_loss = loss_of(cand)
            if cand_loss <= current:
                accepted = True
                break
            scale *= config.backoff
        if accepted:
            improvement = current - cand_loss
            raw, current = cand, cand_loss
            scale = min(1.0, scale * 1.5)
        history.train_loss.append(current)
        history.step_scale.append(scale)
        if eval_records:
            ev = mean_loglik(raw_to_params(raw, floor), eval_records, config.include_interventions)
            history.eval_loglik.append(ev)
            if ev > best_eval:
                best_raw, best_eval, stale = raw, ev, 0
                history.best_iteration = it
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best_raw = raw
            history.best_iteration = it
        if not accepted or improvement < config.tol:
            break
    return raw_to_params(best_raw, floor), history
