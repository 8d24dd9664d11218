"""Training strategies.

* ``si+tf``: system-identification ELBO for ``epochs_si`` epochs, then the
  forecast ELBO for ``epochs_tf`` epochs starting from the best SI iterate.
* ``tf``: forecast ELBO only, for ``epochs_si + epochs_tf`` epochs.
* ``hr``: system-identification ELBO on records cut at ``t*``, same budget.
* ``kf``: maximum-likelihood linear model.

Each phase early-stops on its own eval objective and keeps the best iterate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ssmcast import diffmath as dm
from ssmcast import dssm, lgssm
from ssmcast.data.records import NormalizationStats, PatientRecord
from ssmcast.pipelines.checkpoint import CheckpointEnvelope
from ssmcast.pipelines.optim import Adam
from ssmcast.pipelines.parallel import ordered_map

STRATEGIES = ("si+tf", "tf", "hr", "kf")
NOISE_NAMES = ("theta/logQ", "theta/logR", "theta/logU")


class TrainingDivergedError(RuntimeError):
    """Non-finite objective; ``last_good`` is the best checkpoint seen so far."""

    def __init__(self, message: str, last_good: CheckpointEnvelope | None):
        self.last_good = last_good
        super().__init__(message)


@dataclass
class TrainConfig:
    strategy: str = "si+tf"
    learning_rate: float = 1e-3
    finetune_learning_rate: float | None = None  # forecast phase of si+tf; None = learning_rate
    batch_size: int = 16
    epochs_si: int = 50
    epochs_tf: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    t_star: int | None = None  # fixed index; otherwise t_star_fraction of each record
    t_star_fraction: float = 0.5
    tau: int = 72
    patience: int = 10
    n_samples: int = 1
    eval_samples: int = 4
    freeze_phi: bool = False  # during forecast fine-tuning
    freeze_noise: bool = False
    grad_chunk: int = 0  # records per gradient chunk; 0 = whole batch
    kf_iterations: int = 300
    kf_learning_rate: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r} (expected one of {', '.join(STRATEGIES)})")
        positive = ("learning_rate", "batch_size", "n_samples", "eval_samples", "kf_iterations", "kf_learning_rate")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs_si < 0 or self.epochs_tf < 0 or self.epochs_si + self.epochs_tf < 1:
            raise ValueError("epoch counts must be non-negative with a positive total")
        if self.strategy == "si+tf" and (self.epochs_si < 1 or self.epochs_tf < 1):
            raise ValueError("si+tf needs at least one epoch in each phase")
        if self.finetune_learning_rate is not None and not self.finetune_learning_rate > 0:
            raise ValueError("finetune_learning_rate must be positive")
        if not 0.0 < self.t_star_fraction < 1.0:
            raise ValueError("t_star_fraction must lie in (0, 1)")
        if self.t_star is not None and self.t_star < 1:
            raise ValueError("t_star must be >= 1")
        if self.tau < 1 or self.patience < 1 or self.grad_chunk < 0:
            raise ValueError("tau and patience must be >= 1 and grad_chunk >= 0")

    def t_star_for(self, T: int) -> int:
        if self.t_star is not None:
            return min(self.t_star, T)
        return min(max(1, int(math.floor(self.t_star_fraction * T))), T)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CurveRow:
    epoch: int
    phase: str
    train_objective: float
    eval_objective: float


@dataclass
class TrainResult:
    checkpoint: CheckpointEnvelope
    curve: list[CurveRow] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _length_buckets(records) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for k, r in enumerate(records):
        buckets.setdefault(r.T, []).append(k)
    return buckets


def make_batches(records, batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Index batches of equal-length records; shuffled when ``rng`` is given."""
    batches = []
    for T in sorted(_length_buckets(records)):
        idx = list(_length_buckets(records)[T])
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        batches.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def _stack(records, idx):
    return np.stack([records[k].x for k in idx]), np.stack([records[k].u for k in idx])


def _batch_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


class _Objective:
    """Batch ELBO for one phase; ``kind`` is ``"si"`` or ``"tf"``."""

    def __init__(self, kind: str, cfg: dssm.DssmConfig, tc: TrainConfig):
        self.kind, self.cfg, self.tc = kind, cfg, tc

    def horizon(self, T: int) -> tuple[int, int]:
        t_star = self.tc.t_star_for(T)
        if t_star >= T:
            t_star = max(1, T - 1)
        return t_star, min(self.tc.tau, T - t_star)

    def breakdown(self, params, x, u, noise: dssm.NoisePlan) -> dssm.ElboBreakdown:
        if self.kind == "si":
            return dssm.elbo_system_id(x, u, params, self.cfg, noise)
        t_star, tau = self.horizon(x.shape[1])
        return dssm.elbo_forecast(x, u, t_star, tau, params, self.cfg, noise)

    def steps(self, T: int) -> int:
        return T if self.kind == "si" else max(1, self.horizon(T)[1])

    def noise(self, seed: int, n_samples: int, n: int, T: int) -> dssm.NoisePlan:
        return dssm.NoisePlan.generate(seed, n_samples, n, T, self.cfg.z_dim, self.cfg.i_dim)


def _select(noise: dssm.NoisePlan, idx: list[int]) -> dssm.NoisePlan:
    return dssm.NoisePlan(noise.seed, noise.z[:, idx], noise.u[:, idx])


def _batch_gradient(obj: _Objective, params, x, u, noise, threads: int):
    """Mean-ELBO value and gradient of the per-step loss, reduced over fixed chunks in order."""
    n, T = x.shape[:2]
    chunk = obj.tc.grad_chunk or n
    parts = [list(range(s, min(n, s + chunk))) for s in range(0, n, chunk)]
    scale = 1.0 / (n * obj.steps(T))

    def one(idx):
        sub = _select(noise, idx)
        holder = {}

        def loss(p):
            b = obj.breakdown(p, x[idx], u[idx], sub)
            holder["elbo"] = float(dm.value_of(b.elbo).reshape(-1)[0])
            return dm.mul(-len(idx) * scale, b.elbo)

        _, g = dm.value_and_gradient(loss, params)
        return holder["elbo"] * len(idx), g

    results = ordered_map(one, parts, threads)
    total = sum(r[0] for r in results) / n
    grad = {k: sum(r[1][k] for r in results) for k in params}
    return total, grad


def evaluate_objective(obj: _Objective, params, records, seed: int, n_samples: int) -> float:
    """Mean ELBO per record under a fixed noise plan (eager, no tape)."""
    if not records:
        return float("nan")
    total = 0.0
    for b, idx in enumerate(make_batches(records, 64, None)):
        x, u = _stack(records, idx)
        noise = obj.noise(_batch_seed(seed, 7919, b), n_samples, len(idx), x.shape[1])
        try:
            total += obj.breakdown(params, x, u, noise).values()["elbo"] * len(idx)
        except (FloatingPointError, dm.DomainError):
            return float("nan")  # the caller treats this as divergence
    return total / len(records)


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def _channels(records):
    return list(records[0].obs_channels), list(records[0].int_channels)


def _dssm_envelope(tc, cfg, params, records, stats, echo, meta) -> CheckpointEnvelope:
    oc, ic = _channels(records)
    return CheckpointEnvelope(
        strategy=tc.strategy, model_kind="dssm", tensors={k: np.array(v) for k, v in params.items()},
        model_config=cfg.to_json(), obs_channels=oc, int_channels=ic, normalization=stats,
        config=echo, seed=tc.seed, meta=meta,
    )


def _run_phase(kind, params, train, evalset, tc, cfg, epochs, epoch0, curve, threads, on_diverge):
    obj = _Objective(kind, cfg, tc)
    lr = tc.learning_rate
    if kind == "tf" and tc.strategy == "si+tf" and tc.finetune_learning_rate is not None:
        lr = tc.finetune_learning_rate
    opt = Adam(lr, tc.beta1, tc.beta2, tc.eps, tc.clip_norm)
    if tc.freeze_noise:
        opt.freeze(NOISE_NAMES)
    if kind == "tf" and tc.freeze_phi and tc.strategy == "si+tf":
        opt.freeze(k for k in params if k.startswith("phi/"))
    monitor = evalset or train
    best = params
    best_eval = evaluate_objective(obj, params, monitor, tc.seed, tc.eval_samples)
    if not math.isfinite(best_eval):
        on_diverge(best, f"non-finite eval objective before {kind} training")
    stale, ran = 0, 0
    phase_id = {"si": 1, "tf": 2}[kind]
    for e in range(epochs):
        epoch = epoch0 + e + 1
        ran += 1
        rng = np.random.default_rng(_batch_seed(tc.seed, phase_id, epoch))
        epoch_total, n_seen = 0.0, 0
        for b, idx in enumerate(make_batches(train, tc.batch_size, rng)):
            x, u = _stack(train, idx)
            noise = obj.noise(_batch_seed(tc.seed, phase_id, epoch, b), tc.n_samples, len(idx), x.shape[1])
            try:
                value, grad = _batch_gradient(obj, params, x, u, noise, threads)
                if not math.isfinite(value):
                    raise FloatingPointError("non-finite objective")
                params = opt.step(params, grad)
            except (FloatingPointError, dm.DomainError) as exc:
                on_diverge(best, f"{kind} phase, epoch {epoch}, batch {b + 1}: {exc}")
            epoch_total += value * len(idx)
            n_seen += len(idx)
        ev = evaluate_objective(obj, params, monitor, tc.seed, tc.eval_samples)
        if not math.isfinite(ev):
            on_diverge(best, f"non-finite eval objective at epoch {epoch}")
        curve.append(CurveRow(epoch, kind, epoch_total / n_seen, ev))
        if ev > best_eval:
            best, best_eval, stale = params, ev, 0
        else:
            stale += 1
            if stale >= tc.patience:
                break
    return best, best_eval, epoch0 + ran


def train(train_records: list[PatientRecord], eval_records: list[PatientRecord], tc: TrainConfig,
          model_cfg: dssm.DssmConfig | None = None, stats: NormalizationStats | None = None,
          echo: dict | None = None, threads: int = 1) -> TrainResult:
    """Train one strategy; returns the best-eval checkpoint and the learning curve."""
    tc.validate()
    if not train_records:
        raise ValueError("train needs at least one training record")
    for r in list(train_records) + list(eval_records):
        if tc.strategy != "hr" and not r.is_complete():
            raise ValueError(f"record {r.patient_id} is not imputed")
    echo = dict(echo or {})
    echo.setdefault("train", tc.to_json())
    oc, ic = _channels(train_records)
    if tc.strategy == "kf":
        return _train_kf(train_records, eval_records, tc, model_cfg, stats, echo)
    cfg = model_cfg or dssm.DssmConfig(o_dim=len(oc), i_dim=len(ic))
    if (cfg.o_dim, cfg.i_dim) != (len(oc), len(ic)):
        raise ValueError("model dimensions do not match the record channels")
    if tc.strategy == "hr":
        # cut before anything reads the data so the future is never touched
        train_records = [r.truncated(tc.t_star_for(r.T)) for r in train_records]
        eval_records = [r.truncated(tc.t_star_for(r.T)) for r in eval_records]
        for r in train_records + eval_records:
            if not r.is_complete():
                raise ValueError(f"record {r.patient_id} is not imputed before t*")
    params = dssm.init_params(cfg, tc.seed)
    curve: list[CurveRow] = []
    meta: dict = {}

    def on_diverge(best, message):
        raise TrainingDivergedError(message, _dssm_envelope(tc, cfg, best, train_records, stats, echo,
                                                             {"diverged": message}))

    total = tc.epochs_si + tc.epochs_tf
    if tc.strategy == "si+tf":
        params, ev_si, ep = _run_phase("si", params, train_records, eval_records, tc, cfg, tc.epochs_si, 0,
                                       curve, threads, on_diverge)
        params, ev, ep = _run_phase("tf", params, train_records, eval_records, tc, cfg, tc.epochs_tf, ep,
                                    curve, threads, on_diverge)
        meta.update(best_eval_si=ev_si)
    elif tc.strategy == "tf":
        params, ev, ep = _run_phase("tf", params, train_records, eval_records, tc, cfg, total, 0,
                                    curve, threads, on_diverge)
    else:
        params, ev, ep = _run_phase("si", params, train_records, eval_records, tc, cfg, total, 0,
                                    curve, threads, on_diverge)
    meta.update(best_eval=ev, epochs_run=len(curve))
    return TrainResult(_dssm_envelope(tc, cfg, params, train_records, stats, echo, meta), curve)


def _train_kf(train_records, eval_records, tc, model_cfg, stats, echo) -> TrainResult:
    z_dim = model_cfg.z_dim if model_cfg is not None else 3
    fc = lgssm.LgssmFitConfig(
        z_dim=z_dim, iterations=tc.kf_iterations, learning_rate=tc.kf_learning_rate,
        beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, clip_norm=tc.clip_norm,
        patience=tc.patience, seed=tc.seed,
    )
    try:
        params, hist = lgssm.fit_lgssm(train_records, fc, eval_records or None)
    except lgssm.KalmanNumericalError as exc:
        raise TrainingDivergedError(str(exc), None) from None
    oc, ic = _channels(train_records)
    curve = [
        CurveRow(k + 1, "kf", -loss, hist.eval_loglik[k] if k < len(hist.eval_loglik) else float("nan"))
        for k, loss in enumerate(hist.train_loss)
    ]
    env = CheckpointEnvelope(
        strategy="kf", model_kind="lgssm", tensors=params.to_tensors(),
        model_config={"z_dim": z_dim, "o_dim": len(oc), "i_dim": len(ic), "cov_floor": fc.cov_floor},
        obs_channels=oc, int_channels=ic, normalization=stats, config=echo, seed=tc.seed,
        meta={"best_iteration": hist.best_iteration, "epochs_run": len(curve)},
    )
    return TrainResult(env, curve)
