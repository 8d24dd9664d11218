"""Forecast MAE at several horizons, cross-validation and report files."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from ssmcast import __version__, dssm
from ssmcast.data.io import dump_json
from ssmcast.data.preprocess import invert_normalization, prepare_records, split_by_hash
from ssmcast.data.records import EventStream, PatientRecord
from ssmcast.pipelines.checkpoint import CheckpointEnvelope
from ssmcast.pipelines.parallel import ordered_map
from ssmcast.pipelines.train import TrainConfig, train

DEFAULT_HORIZONS = (24, 48, 72)
CSV_COLUMNS = ("strategy", "fold", "horizon", "mae", "sem", "n_records", "runtime_s")

# published MAE@24 on the ICU cohort, "mean(sem)"; reference only
REFERENCE_MAE24 = {"hr": "0.473(0.019)", "kf": "0.614(0.036)", "tf": "0.512(0.017)", "si+tf": "0.453(0.012)"}


@dataclass
class EvalConfig:
    t_star: int = 48
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    n_paths: int = 128
    seed: int = 0
    observed_only: bool = False  # score only originally observed cells
    denormalize: bool = False

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        if self.t_star < 1 or not self.horizons or min(self.horizons) < 1 or self.n_paths < 1:
            raise ValueError("t_star, horizons and n_paths must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d


@dataclass
class HorizonMetrics:
    horizon: int
    mae: float
    sem: float
    n_records: int
    n_excluded: int
    int_mae: float
    fold_values: list[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    strategy: str
    metrics: list[HorizonMetrics]
    sem_basis: str  # "records" (one checkpoint) or "folds"
    folds: list[dict] = field(default_factory=list)
    runtime_s: float | None = None
    config: dict = field(default_factory=dict)
    tool_version: str = __version__

    def metric(self, horizon: int) -> HorizonMetrics:
        for m in self.metrics:
            if m.horizon == horizon:
                return m
        raise KeyError(horizon)

    def to_json(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "strategy": self.strategy,
            "sem_basis": self.sem_basis,
            "metrics": [asdict(m) for m in self.metrics],
            "folds": self.folds,
            "runtime_s": self.runtime_s,
            "config": self.config,
            "reference_mae24": REFERENCE_MAE24,
        }

    def json_text(self) -> str:
        return dump_json(finite_or_none(self.to_json()))

    def rows(self) -> list[dict]:
        """One row per horizon; per-fold values live in the JSON report only."""
        rt = "" if self.runtime_s is None else f"{self.runtime_s:.3f}"
        return [{"strategy": self.strategy, "fold": "all", "horizon": m.horizon, "mae": m.mae,
                 "sem": m.sem, "n_records": m.n_records, "runtime_s": rt} for m in self.metrics]

    def csv_text(self) -> str:
        return reports_csv_text([self])


def reports_csv_text(reports: Sequence[MetricsReport]) -> str:
    """One CSV for several reports; provenance goes into ``#`` comment lines."""
    buf = io.StringIO()
    first = reports[0]
    buf.write(f"# ssmcast {first.tool_version}; sem over {first.sem_basis}\n")
    buf.write("# reference MAE@24 (ICU cohort, not reproduced here): "
              + ", ".join(f"{k.upper()} {v}" for k, v in REFERENCE_MAE24.items()) + "\n")
    for r in reports:
        cfg = json.dumps(finite_or_none(r.config), sort_keys=True, separators=(",", ":"))
        buf.write(f"# config[{r.strategy}]: {cfg}\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.rows():
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else repr(v)


def finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [finite_or_none(v) for v in obj]
    return obj


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean: sample std (ddof 1) over sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float("nan")
    return float(np.std(v, ddof=1) / np.sqrt(v.size))


def _denorm(env: CheckpointEnvelope, f, r: PatientRecord):
    return invert_normalization(f, env.normalization), invert_normalization(r, env.normalization)


def per_record_errors(env: CheckpointEnvelope, records: Sequence[PatientRecord], ec: EvalConfig,
                      threads: int = 1) -> list[dict | None]:
    """Absolute forecast errors per record, or ``None`` for records too short for any horizon."""
    H = max(ec.horizons)

    def one(r: PatientRecord):
        avail = r.T - ec.t_star
        if avail < min(ec.horizons):
            return None
        f = env.forecast(r, ec.t_star, min(H, avail), n_paths=ec.n_paths, seed=ec.seed)
        if ec.denormalize:
            if env.normalization is None:
                raise ValueError("checkpoint carries no normalisation statistics")
            f, r = _denorm(env, f, r)
        sl = slice(ec.t_star, ec.t_star + f.horizon)
        return {
            "patient_id": r.patient_id,
            "obs_err": np.abs(f.obs_mean - r.x[sl]),
            "obs_mask": r.x_mask[sl],
            "int_err": np.abs(f.int_mean - r.u[sl]),
        }

    return ordered_map(one, list(records), threads)


def evaluate_mae(env: CheckpointEnvelope, records: Sequence[PatientRecord], ec: EvalConfig | None = None,
                 threads: int = 1, record_runtime: bool = False) -> MetricsReport:
    """MAE@h for each horizon over the test records (order-independent).

    MAE@h averages ``|x_hat - x|`` over steps ``t*+1 .. t*+h`` and all
    observation channels, then over records; records shorter than ``t*+h`` are
    excluded from that horizon and counted.  The SEM is over records.
    """
    ec = ec or EvalConfig()
    start = time.perf_counter()
    records = sorted(records, key=lambda r: r.patient_id)
    errs = per_record_errors(env, records, ec, threads)
    metrics = []
    for h in ec.horizons:
        vals, ivals = [], []
        for e in errs:
            if e is None or e["obs_err"].shape[0] < h:
                continue
            o = e["obs_err"][:h]
            if ec.observed_only:
                m = e["obs_mask"][:h]
                if not m.any():
                    continue
                vals.append(float(o[m].mean()))
            else:
                vals.append(float(o.mean()))
            ie = e["int_err"][:h]
            ivals.append(float(ie.mean()) if ie.size else float("nan"))
        n = len(vals)
        metrics.append(HorizonMetrics(
            h, float(np.mean(vals)) if n else float("nan"), sem(vals), n, len(records) - n,
            float(np.mean(ivals)) if ivals else float("nan"),
        ))
    runtime = time.perf_counter() - start if record_runtime else None
    return MetricsReport(env.strategy, metrics, "records", runtime_s=runtime,
                         config={"eval": ec.to_json(), "checkpoint": env.config})


def cross_validate(streams: Sequence[EventStream], obs_channels, int_channels, tc: TrainConfig,
                   ec: EvalConfig | None = None, model_cfg: dssm.DssmConfig | None = None,
                   n_folds: int = 10, grid_step: float = 1.0, threads: int = 1,
                   record_runtime: bool = False, echo: dict | None = None,
                   fractions: Sequence[float] | None = None) -> MetricsReport:
    """k-fold protocol: per fold, split by hash, prepare on the train split, train, test.

    Without ``fractions`` the test and eval shares are ``1/n_folds`` each, so the
    test splits of the folds tile the cohort (10 folds gives 80/10/10).

    The fold SEM is ``std(fold means, ddof=1) / sqrt(n_folds)``.
    """
    ec = ec or EvalConfig()
    start = time.perf_counter()
    ids = [s.patient_id for s in streams]
    if fractions is None:
        share = 1.0 / n_folds if n_folds > 2 else 0.5 / n_folds
        fractions = (1.0 - 2 * share, share, share)
    folds = []
    for k in range(n_folds):
        tr, ev, te = split_by_hash(ids, fractions, fold=k, n_folds=n_folds)
        if not te:
            raise ValueError(f"fold {k} has an empty test split")
        prepared, stats, _ = prepare_records(streams, obs_channels, int_channels, grid_step, tr)
        by_id = {r.patient_id: r for r in prepared}
        res = train([by_id[i] for i in tr], [by_id[i] for i in ev], tc, model_cfg, stats, echo, threads)
        rep = evaluate_mae(res.checkpoint, [by_id[i] for i in te], ec, threads)
        folds.append({
            "fold": k, "n_train": len(tr), "n_eval": len(ev), "n_test": len(te),
            "metrics": [asdict(m) for m in rep.metrics],
        })
    metrics = []
    for j, h in enumerate(ec.horizons):
        vals = [f["metrics"][j]["mae"] for f in folds if math.isfinite(f["metrics"][j]["mae"])]
        ivals = [f["metrics"][j]["int_mae"] for f in folds if math.isfinite(f["metrics"][j]["int_mae"])]
        metrics.append(HorizonMetrics(
            h, float(np.mean(vals)) if vals else float("nan"), sem(vals),
            sum(f["metrics"][j]["n_records"] for f in folds), sum(f["metrics"][j]["n_excluded"] for f in folds),
            float(np.mean(ivals)) if ivals else float("nan"), vals,
        ))
    runtime = time.perf_counter() - start if record_runtime else None
    config = dict(echo or {})
    config.update(eval=ec.to_json(), train=tc.to_json(), n_folds=n_folds, grid_step=grid_step,
                  fractions=list(fractions))
    return MetricsReport(tc.strategy, metrics, "folds", folds, runtime, config)
