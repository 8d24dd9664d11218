"""Deep state space model with intervention feedback and a recurrent encoder.

Generative model (one record, steps ``t = 1..T``)::

    z_1 ~ N(m0, exp(logP0))
    z_t ~ N(A(z_{t-1}) + B(u_t), exp(logQ))
    x_t ~ N(C(z_t), exp(logR))
    u_t ~ N(D(z_{t-1}), exp(logU))       for t >= 2; u_1 is fixed at zero

``A``, ``B``, ``C`` and ``D`` are tanh MLPs.  The posterior is
``q(z_t | h_t, z_{t-1})`` where ``h_t`` is a forward LSTM state over
``(x_t, u_t)``.

All parameters live in one flat :class:`~ssmcast.diffmath.ParameterSet`:
generative tensors are named ``theta/...`` and encoder tensors ``phi/...``.
Every function here accepts either plain arrays or tape variables, so the
same code is evaluated eagerly and differentiated.

Batches are ``(N, T, dim)`` arrays of equal-length records.  ``S`` Monte
Carlo samples are laid out sample-major as a batch of ``S * N`` rows.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from ssmcast import diffmath as dm
from ssmcast.data.preprocess import patient_seed
from ssmcast.lgssm import DimensionError, ForecastResult, LgssmParams

NETS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class DssmConfig:
    z_dim: int = 3
    o_dim: int = 6
    i_dim: int = 2
    hidden: int = 32
    n_layers: int = 3  # affine layers per MLP; 1 = purely linear
    lstm_hidden: int = 50
    combiner_hidden: int = 32
    combiner_layers: int = 2
    var_floor: float = 1e-6
    skip_initial_kl: bool = False  # drop the KL of z_1 against the initial prior

    def __post_init__(self):
        if min(self.z_dim, self.o_dim, self.i_dim, self.lstm_hidden) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.n_layers < 1 or self.combiner_layers < 1:
            raise ValueError("networks need at least one layer")
        if self.n_layers > 1 and self.hidden < 1 or self.combiner_layers > 1 and self.combiner_hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")

    def net_shape(self, name: str) -> tuple[int, int]:
        z, o, i = self.z_dim, self.o_dim, self.i_dim
        return {"A": (z, z), "B": (i, z), "C": (z, o), "D": (z, i)}[name]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "DssmConfig":
        return cls(**dict(obj))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _layer_sizes(n_in: int, n_out: int, hidden: int, n_layers: int) -> list[tuple[int, int]]:
    widths = [n_in] + [hidden] * (n_layers - 1) + [n_out]
    return list(zip(widths[:-1], widths[1:]))


def parameter_shapes(cfg: DssmConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for net in NETS:
        for k, (a, b) in enumerate(_layer_sizes(*cfg.net_shape(net), cfg.hidden, cfg.n_layers)):
            shapes[f"theta/{net}/W{k}"] = (a, b)
            shapes[f"theta/{net}/b{k}"] = (b,)
    z, o, i, h = cfg.z_dim, cfg.o_dim, cfg.i_dim, cfg.lstm_hidden
    shapes.update({
        "theta/logQ": (z,), "theta/logR": (o,), "theta/logU": (i,),
        "theta/m0": (z,), "theta/logP0": (z,),
        "phi/lstm/W": (o + i + h, 4 * h), "phi/lstm/b": (4 * h,),
    })
    for k, (a, b) in enumerate(_layer_sizes(h + z, 2 * z, cfg.combiner_hidden, cfg.combiner_layers)):
        shapes[f"phi/comb/W{k}"] = (a, b)
        shapes[f"phi/comb/b{k}"] = (b,)
    return shapes


def init_params(cfg: DssmConfig, seed: int = 0) -> dm.ParameterSet:
    """Scaled-normal weights, zero biases, LSTM forget bias 1, unit prior variances."""
    rng = np.random.default_rng(seed)
    out = {}
    h = cfg.lstm_hidden
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit("/", 1)[1]
        if leaf.startswith("W"):
            out[name] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
        elif name == "phi/lstm/b":
            b = np.zeros(shape)
            b[h:2 * h] = 1.0
            out[name] = b
        elif name == "theta/logQ":
            out[name] = np.full(shape, np.log(0.1))
        else:
            out[name] = np.zeros(shape)
    return dm.ParameterSet(out)


def from_lgssm(lg: LgssmParams, cfg: DssmConfig, phi: Mapping | None = None, seed: int = 0) -> dm.ParameterSet:
    """Linear generative networks reproducing ``lg``; needs ``n_layers == 1`` and diagonal noise.

    Encoder weights come from ``phi`` when given, otherwise from :func:`init_params`.
    """
    if cfg.n_layers != 1:
        raise ValueError("from_lgssm needs single-layer (linear) networks")
    if (cfg.z_dim, cfg.o_dim, cfg.i_dim) != (lg.z_dim, lg.o_dim, lg.i_dim):
        raise DimensionError("config dimensions differ from the linear model")
    for key in ("Q", "R", "U", "P0"):
        S = getattr(lg, key)
        if np.any(S - np.diag(np.diag(S))):
            raise ValueError(f"{key} must be diagonal for a diagonal-Gaussian model")
    tensors = dict(init_params(cfg, seed))
    for net in NETS:
        tensors[f"theta/{net}/W0"] = np.array(getattr(lg, net).T)
        tensors[f"theta/{net}/b0"] = np.zeros(cfg.net_shape(net)[1])
    tensors["theta/logQ"] = np.log(np.diag(lg.Q))
    tensors["theta/logR"] = np.log(np.diag(lg.R))
    tensors["theta/logU"] = np.log(np.diag(lg.U))
    tensors["theta/logP0"] = np.log(np.diag(lg.P0))
    tensors["theta/m0"] = np.array(lg.m0)
    if phi is not None:
        tensors.update({k: v for k, v in phi.items() if k.startswith("phi/")})
    return dm.ParameterSet(tensors)


def check_params(params: Mapping, cfg: DssmConfig) -> None:
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise DimensionError(f"parameter names differ from config (missing={missing}, unexpected={extra})")
    for name, shape in expected.items():
        if tuple(dm.value_of(params[name]).shape) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {dm.value_of(params[name]).shape}")


def theta_of(params: Mapping) -> dict:
    """The generative tensors (``theta/...``)."""
    return {k: v for k, v in params.items() if k.startswith("theta/")}


def phi_of(params: Mapping) -> dict:
    """The encoder tensors (``phi/...``)."""
    return {k: v for k, v in params.items() if k.startswith("phi/")}


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def mlp(p: Mapping, prefix: str, x, n_layers: int):
    """tanh MLP with a linear output layer; weights are applied as ``x @ W + b``."""
    h = x
    for k in range(n_layers):
        h = dm.add(dm.matmul(h, p[f"{prefix}/W{k}"]), p[f"{prefix}/b{k}"])
        if k < n_layers - 1:
            h = dm.tanh(h)
    return h


def lstm_cell(p: Mapping, inp, h, c, hidden: int):
    """One LSTM step; gates are packed ``[input, forget, cell, output]``."""
    gates = dm.add(dm.matmul(dm.concat([inp, h], axis=-1), p["phi/lstm/W"]), p["phi/lstm/b"])
    H = hidden
    i = dm.sigmoid(dm.slice_(gates, (slice(None), slice(0, H))))
    f = dm.sigmoid(dm.slice_(gates, (slice(None), slice(H, 2 * H))))
    g = dm.tanh(dm.slice_(gates, (slice(None), slice(2 * H, 3 * H))))
    o = dm.sigmoid(dm.slice_(gates, (slice(None), slice(3 * H, 4 * H))))
    c = dm.add(dm.mul(f, c), dm.mul(i, g))
    return dm.mul(o, dm.tanh(c)), c


def _encode_batch(p, x, u, t_end: int, cfg: DssmConfig) -> list:
    n = x.shape[0]
    h = np.zeros((n, cfg.lstm_hidden))
    c = np.zeros((n, cfg.lstm_hidden))
    inputs = np.concatenate([x, u], axis=-1)
    out = []
    for t in range(t_end):
        h, c = lstm_cell(p, inputs[:, t], h, c, cfg.lstm_hidden)
        out.append(h)
    return out


def _record_xu(record, cfg: DssmConfig):
    x, u = np.asarray(record.x, dtype=np.float64), np.asarray(record.u, dtype=np.float64)
    if x.ndim != 2 or u.ndim != 2 or x.shape[1] != cfg.o_dim or u.shape[1] != cfg.i_dim or len(u) != len(x):
        raise DimensionError(f"record shapes {x.shape}, {u.shape} do not match config dims o={cfg.o_dim}, i={cfg.i_dim}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("record must be imputed (contains non-finite values)")
    return x, u


def encode(record, t_end: int, params: Mapping, cfg: DssmConfig) -> np.ndarray:
    """Encoder hidden states ``h_1 .. h_{t_end}`` as a ``(t_end, lstm_hidden)`` array."""
    x, u = _record_xu(record, cfg)
    if not 1 <= t_end <= len(x):
        raise ValueError(f"t_end={t_end} outside record of length {len(x)}")
    hs = _encode_batch(params, x[None], u[None], t_end, cfg)
    return np.stack([dm.value_of(h)[0] for h in hs])


def posterior_step(h_t, z_prev, params: Mapping, cfg: DssmConfig):
    """Mean and (floored) variance of ``q(z_t | h_t, z_{t-1})``."""
    out = mlp(params, "phi/comb", dm.concat([h_t, z_prev], axis=-1), cfg.combiner_layers)
    z = cfg.z_dim
    mean = dm.slice_(out, (slice(None), slice(0, z)))
    logvar = dm.slice_(out, (slice(None), slice(z, 2 * z)))
    return mean, dm.variance_from_logvar(logvar, cfg.var_floor)


def prior_step(z_prev, u_t, params: Mapping, cfg: DssmConfig, first: bool = False):
    """Mean and variance of ``p(z_t | z_{t-1}, u_t)``, or the initial prior when ``first``."""
    if first:
        return params["theta/m0"], dm.variance_from_logvar(params["theta/logP0"], cfg.var_floor)
    mean = dm.add(mlp(params, "theta/A", z_prev, cfg.n_layers), mlp(params, "theta/B", u_t, cfg.n_layers))
    return mean, dm.variance_from_logvar(params["theta/logQ"], cfg.var_floor)


def emit_observation(z, params: Mapping, cfg: DssmConfig):
    return mlp(params, "theta/C", z, cfg.n_layers), dm.variance_from_logvar(params["theta/logR"], cfg.var_floor)


def emit_intervention(z_prev, params: Mapping, cfg: DssmConfig):
    """``p(u_t | z_{t-1})``."""
    return mlp(params, "theta/D", z_prev, cfg.n_layers), dm.variance_from_logvar(params["theta/logU"], cfg.var_floor)


# ---------------------------------------------------------------------------
# Noise and objectives
# ---------------------------------------------------------------------------


@dataclass
class NoisePlan:
    """Standard-normal draws for ``n_samples`` paths of ``n_records`` records.

    ``z`` is ``(S, N, T, z_dim)`` (state reparameterisation) and ``u`` is
    ``(S, N, T, i_dim)`` (sampled intervention forecasts).
    """

    seed: int
    z: np.ndarray
    u: np.ndarray

    @classmethod
    def generate(cls, seed: int, n_samples: int, n_records: int, T: int, z_dim: int, i_dim: int) -> "NoisePlan":
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n_samples, n_records, T, z_dim))
        u = rng.standard_normal((n_samples, n_records, T, i_dim))
        return cls(seed, z, u)

    @classmethod
    def zeros(cls, n_samples: int, n_records: int, T: int, z_dim: int, i_dim: int) -> "NoisePlan":
        return cls(-1, np.zeros((n_samples, n_records, T, z_dim)), np.zeros((n_samples, n_records, T, i_dim)))

    @property
    def n_samples(self) -> int:
        return self.z.shape[0]

    def flat(self, T: int):
        S, N = self.z.shape[:2]
        if self.z.shape[2] < T:
            raise ValueError(f"noise plan covers {self.z.shape[2]} steps, need {T}")
        return self.z[:, :, :T].reshape(S * N, T, -1), self.u[:, :, :T].reshape(S * N, T, -1)


@dataclass
class ElboBreakdown:
    """Terms of an ELBO, averaged over samples and records.

    ``per_sample`` is the ``(S, N)`` matrix of per-path ELBO values; the
    ``*_t`` vectors are per-step means.
    """

    obs_recon: object
    int_recon: object
    kl: object
    elbo: object
    obs_t: np.ndarray
    int_t: np.ndarray
    kl_t: np.ndarray
    per_sample: np.ndarray = field(repr=False)

    @property
    def stderr(self) -> float:
        S = self.per_sample.shape[0]
        if S < 2:
            return float("nan")
        return float(np.std(self.per_sample.mean(axis=1), ddof=1) / np.sqrt(S))

    def values(self) -> dict[str, float]:
        return {k: float(dm.value_of(getattr(self, k)).reshape(-1)[0]) for k in ("obs_recon", "int_recon", "kl", "elbo")}


def _stack_steps(terms: list, rows: int):
    """(rows,) per-step terms -> (rows, len(terms)); empty lists give zeros."""
    if not terms:
        return np.zeros((rows, 0))
    return dm.concat([dm.reshape(t, (rows, 1)) for t in terms], axis=1)


def _breakdown(obs, intv, kl, S: int, N: int) -> ElboBreakdown:
    rows = S * N
    O, I, K = _stack_steps(obs, rows), _stack_steps(intv, rows), _stack_steps(kl, rows)

    def total(m):
        return dm.sum_(m) * (1.0 / rows) if dm.value_of(m).size else np.zeros(1)

    o_tot, i_tot, k_tot = total(O), total(I), total(K)
    elbo = dm.sub(dm.add(o_tot, i_tot), k_tot)
    per = (dm.value_of(O).sum(axis=1) + dm.value_of(I).sum(axis=1) - dm.value_of(K).sum(axis=1)).reshape(S, N)
    if not np.all(np.isfinite(per)):
        for name, m in (("obs", O), ("int", I), ("kl", K)):
            bad = np.where(~np.all(np.isfinite(dm.value_of(m)), axis=0))[0]
            if bad.size:
                raise dm.NonFiniteError(name, -1, f"ELBO term is non-finite at time step {int(bad[0]) + 1}")

    def per_step(m):
        return dm.value_of(m).mean(axis=0) if dm.value_of(m).size else np.zeros(0)

    return ElboBreakdown(o_tot, i_tot, k_tot, elbo, per_step(O), per_step(I), per_step(K), per)


def _batch(x, u, cfg: DssmConfig):
    x, u = np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64)
    if x.ndim == 2:
        x, u = x[None], u[None]
    if x.shape[2] != cfg.o_dim or u.shape[2] != cfg.i_dim or x.shape[:2] != u.shape[:2]:
        raise DimensionError(f"batch shapes {x.shape}, {u.shape} do not match config")
    return x, u


def _history_pass(p, cfg, xs, us, eps_z, t_end: int, kl_terms: list, obs_terms: list | None,
                  int_terms: list | None):
    """Sample ``z_1..z_{t_end}`` from the posterior, appending per-step terms.

    Returns the last sampled state (or ``None`` when ``t_end == 0``).
    """
    rows = xs.shape[0]
    hs = _encode_batch(p, xs, us, t_end, cfg)
    z_prev = None
    for t in range(t_end):
        try:
            zp_in = np.zeros((rows, cfg.z_dim)) if z_prev is None else z_prev
            q_mean, q_var = posterior_step(hs[t], zp_in, p, cfg)
            z = dm.reparam_sample(q_mean, q_var, eps_z[:, t])
            if t > 0 or not cfg.skip_initial_kl:
                p_mean, p_var = prior_step(z_prev, us[:, t], p, cfg, first=(t == 0))
                kl_terms.append(dm.kl_diag_gaussian(q_mean, q_var, p_mean, p_var))
            if obs_terms is not None:
                c_mean, r_var = emit_observation(z, p, cfg)
                obs_terms.append(dm.gaussian_diag_logpdf(xs[:, t], c_mean, r_var))
            if int_terms is not None and t > 0:
                d_mean, u_var = emit_intervention(z_prev, p, cfg)
                int_terms.append(dm.gaussian_diag_logpdf(us[:, t], d_mean, u_var))
        except dm.NonFiniteError as exc:
            raise dm.NonFiniteError(exc.primitive, exc.op_index, f"at time step {t + 1}") from None
        z_prev = z
    return z_prev


def elbo_system_id(x, u, params: Mapping, cfg: DssmConfig, noise: NoisePlan) -> ElboBreakdown:
    """Time-factorised ELBO of ``log p(x_{1:T}, u_{2:T})``.

    ``x``/``u`` are one record ``(T, dim)`` or a batch ``(N, T, dim)``.  The
    intervention term for ``u_{t+1}`` uses the sampled ``z_t``.
    """
    x, u = _batch(x, u, cfg)
    N, T = x.shape[:2]
    S = noise.n_samples
    eps_z, _ = noise.flat(T)
    if eps_z.shape[0] != S * N:
        raise ValueError("noise plan was generated for a different number of records")
    xs, us = np.tile(x, (S, 1, 1)), np.tile(u, (S, 1, 1))
    obs, intv, kl = [], [], []
    _history_pass(params, cfg, xs, us, eps_z, T, kl, obs, intv)
    return _breakdown(obs, intv, kl, S, N)


def _rollout(p, cfg, z_prev, eps_z, eps_u, t_star: int, horizon: int, on_step=None):
    """Prior rollout over steps ``t_star+1 .. t_star+horizon`` with sampled interventions.

    ``on_step(k, z_prev, z, d_mean)`` is called for each step ``k``.
    """
    for k in range(horizon):
        t = t_star + k
        try:
            d_mean, u_var = emit_intervention(z_prev, p, cfg)
            u_hat = dm.reparam_sample(d_mean, u_var, eps_u[:, t])
            m, q_var = prior_step(z_prev, u_hat, p, cfg)
            z = dm.reparam_sample(m, q_var, eps_z[:, t])
            if on_step is not None:
                on_step(k, z_prev, z, d_mean, u_var)
        except dm.NonFiniteError as exc:
            raise dm.NonFiniteError(exc.primitive, exc.op_index, f"at time step {t + 1}") from None
        z_prev = z
    return z_prev


def elbo_forecast(x, u, t_star: int, tau: int, params: Mapping, cfg: DssmConfig, noise: NoisePlan) -> ElboBreakdown:
    """Forecast ELBO: encode ``[1, t_star]``, roll out ``tau`` steps, score the horizon.

    Reconstruction covers ``t_star+1 .. t_star+tau`` only; the KL covers the
    history.  Over the horizon the rollout is the prior itself, so its KL is 0.
    """
    x, u = _batch(x, u, cfg)
    N, T = x.shape[:2]
    if t_star < 1 or tau < 0 or t_star + tau > T:
        raise ValueError(f"need 1 <= t_star and t_star + tau <= T (t_star={t_star}, tau={tau}, T={T})")
    S = noise.n_samples
    eps_z, eps_u = noise.flat(t_star + tau)
    if eps_z.shape[0] != S * N:
        raise ValueError("noise plan was generated for a different number of records")
    xs, us = np.tile(x[:, :t_star + tau], (S, 1, 1)), np.tile(u[:, :t_star + tau], (S, 1, 1))
    kl, obs, intv = [], [], []
    z_last = _history_pass(params, cfg, xs[:, :t_star], us[:, :t_star], eps_z, t_star, kl, None, None)

    def score(k, z_prev, z, d_mean, u_var):
        t = t_star + k
        c_mean, r_var = emit_observation(z, params, cfg)
        obs.append(dm.gaussian_diag_logpdf(xs[:, t], c_mean, r_var))
        intv.append(dm.gaussian_diag_logpdf(us[:, t], d_mean, u_var))

    _rollout(params, cfg, z_last, eps_z, eps_u, t_star, tau, score)
    return _breakdown(obs, intv, kl, S, N)


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------


def forecast(record, t_star: int, horizon: int, params: Mapping, cfg: DssmConfig, n_paths: int = 128,
             seed: int = 0, start_state=None, zero_noise: bool = False) -> ForecastResult:
    """Monte Carlo forecast of x and u over ``t_star+1 .. t_star+horizon``.

    Paths start from a posterior sample of ``z_{t_star}`` (or from
    ``start_state`` when given) and roll out exactly like the forecast ELBO.
    Means are path averages; variances are the spread of the path means plus
    the emission noise.  The noise seed is ``seed XOR fnv1a64(patient_id)``.
    ``zero_noise`` replaces every draw with 0 (a deterministic rollout).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x, u = _record_xu(record, cfg)
    if not 1 <= t_star <= len(x):
        raise ValueError(f"t_star={t_star} outside record of length {len(x)}")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    pid = getattr(record, "patient_id", "")
    T = t_star + horizon
    if zero_noise:
        noise = NoisePlan.zeros(n_paths, 1, T, cfg.z_dim, cfg.i_dim)
    else:
        noise = NoisePlan.generate(patient_seed(seed, pid), n_paths, 1, T, cfg.z_dim, cfg.i_dim)
    eps_z, eps_u = noise.flat(T)
    if start_state is None:
        xs, us = np.tile(x[None, :t_star], (n_paths, 1, 1)), np.tile(u[None, :t_star], (n_paths, 1, 1))
        z_last = _history_pass(params, cfg, xs, us, eps_z, t_star, [], None, None)
    else:
        z_last = np.tile(np.asarray(start_state, dtype=np.float64).reshape(1, cfg.z_dim), (n_paths, 1))
    obs_paths = np.zeros((horizon, n_paths, cfg.o_dim))
    int_paths = np.zeros((horizon, n_paths, cfg.i_dim))
    r_var = dm.value_of(dm.variance_from_logvar(params["theta/logR"], cfg.var_floor))
    u_var = dm.value_of(dm.variance_from_logvar(params["theta/logU"], cfg.var_floor))

    def collect(k, z_prev, z, d_mean, _):
        obs_paths[k] = dm.value_of(emit_observation(z, params, cfg)[0])
        int_paths[k] = dm.value_of(d_mean)

    _rollout(params, cfg, z_last, eps_z, eps_u, t_star, horizon, collect)

    def moments(paths, noise_var):
        mean = paths.mean(axis=1)
        spread = paths.var(axis=1) if n_paths > 1 else np.zeros_like(mean)
        return mean, spread + noise_var

    om, ov = moments(obs_paths, r_var)
    im, iv = moments(int_paths, u_var)
    return ForecastResult(t_star, om, ov, im, iv, pid, {"n_paths": n_paths})
