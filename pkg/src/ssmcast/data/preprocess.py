"""Gridding, imputation, normalisation and hash-based splitting."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

import numpy as np

from ssmcast._backend import kernels
from ssmcast.data.records import (
    INT,
    OBS,
    DataFormatError,
    EventStream,
    NormalizationStats,
    PatientRecord,
    UnknownChannelError,
)
from ssmcast.lgssm import ForecastResult

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
STD_FLOOR = 1e-6


def fnv1a64(data: str | bytes) -> int:
    """64-bit FNV-1a hash."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def patient_seed(seed: int, patient_id: str) -> int:
    return (int(seed) & _MASK64) ^ fnv1a64(patient_id)


def channel_dictionary(streams: Iterable[EventStream]) -> tuple[list[str], list[str]]:
    """Sorted observation and intervention channel names seen in ``streams``."""
    obs, ints = set(), set()
    for s in streams:
        for e in s.events:
            (obs if e.kind == OBS else ints).add(e.channel)
    clash = obs & ints
    if clash:
        raise DataFormatError(f"channel(s) used as both obs and int: {', '.join(sorted(clash))}")
    return sorted(obs), sorted(ints)


def _bin_index(time: float, grid_step: float) -> int:
    # bins are (k-1, k] * step, numbered from 1; time 0 joins bin 1
    return max(1, math.ceil(time / grid_step))


def discretize(stream: EventStream, grid_step: float, obs_channels: Sequence[str],
               int_channels: Sequence[str]) -> PatientRecord:
    """Grid an event stream; empty cells are NaN with a false mask.

    Several events in one cell: the latest wins, ties by input order.
    """
    if not stream.events:
        raise DataFormatError(f"patient {stream.patient_id} has no events")
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    obs_idx = {c: k for k, c in enumerate(obs_channels)}
    int_idx = {c: k for k, c in enumerate(int_channels)}
    unknown = [
        e.channel for e in stream.events
        if (e.kind == OBS and e.channel not in obs_idx) or (e.kind == INT and e.channel not in int_idx)
    ]
    if unknown:
        raise UnknownChannelError(unknown, stream.patient_id)
    T = _bin_index(max(e.time for e in stream.events), grid_step)
    x = np.full((T, len(obs_channels)), np.nan)
    u = np.full((T, len(int_channels)), np.nan)
    order = sorted(range(len(stream.events)), key=lambda k: stream.events[k].time)
    for k in order:
        e = stream.events[k]
        t = _bin_index(e.time, grid_step) - 1
        if e.kind == OBS:
            x[t, obs_idx[e.channel]] = e.value
        else:
            u[t, int_idx[e.channel]] = e.value
    return PatientRecord(
        patient_id=stream.patient_id, x=x, x_mask=np.isfinite(x), u=u, u_mask=np.isfinite(u),
        obs_channels=list(obs_channels), int_channels=list(int_channels), grid_step=grid_step,
    )


def impute_observations(record: PatientRecord) -> PatientRecord:
    """Carry the last observed value forward; cells before the first observation become 0."""
    x = kernels.locf_fill(np.where(record.x_mask, record.x, 0.0), record.x_mask)
    return record.with_arrays(x=x)


def nearest_rank(values: Sequence[float], q: float) -> float:
    """The ``ceil(q * n)``-th smallest value (1-based)."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("nearest_rank of an empty sample")
    rank = max(1, math.ceil(q * len(ordered) - 1e-12))
    return ordered[rank - 1]


def intervention_gap_thresholds(streams: Iterable[EventStream], int_channels: Sequence[str],
                                grid_step: float = 1.0, quantile: float = 0.9) -> dict[str, int]:
    """Per-channel continuation threshold, in grid steps.

    Collects within-patient gaps between consecutive events of a channel and
    takes the nearest-rank ``quantile``; channels with fewer than two events
    in every patient fall back to 1.
    """
    gaps: dict[str, list[float]] = {c: [] for c in int_channels}
    any_stream = False
    for s in streams:
        any_stream = True
        times: dict[str, list[float]] = {}
        for e in s.events:
            if e.kind == INT and e.channel in gaps:
                times.setdefault(e.channel, []).append(e.time)
        for c, ts in times.items():
            ts.sort()
            gaps[c].extend(b - a for a, b in zip(ts, ts[1:]))
    if not any_stream:
        raise ValueError("intervention_gap_thresholds needs a non-empty dataset")
    out = {}
    for c in int_channels:
        if not gaps[c]:
            out[c] = 1
        else:
            out[c] = max(1, math.ceil(nearest_rank(gaps[c], quantile) / grid_step - 1e-9))
    return out


def impute_interventions(record: PatientRecord, thresholds: dict[str, int]) -> PatientRecord:
    """Continue a setting across gaps within threshold; elsewhere "no action" (0)."""
    missing = [c for c in record.int_channels if c not in thresholds]
    if missing:
        raise KeyError(f"no threshold for intervention channel(s): {', '.join(missing)}")
    thr = np.array([int(thresholds[c]) for c in record.int_channels], dtype=np.int64)
    u = kernels.continue_interventions(np.where(record.u_mask, record.u, 0.0), record.u_mask, thr)
    return record.with_arrays(u=u)


def fit_normalization(records: Sequence[PatientRecord]) -> NormalizationStats:
    """Per-channel z-score statistics.

    Observation channels use observed cells only; intervention channels use
    every finite cell, so fit after intervention imputation.
    """
    if not records:
        raise ValueError("fit_normalization needs at least one record")
    first = records[0]
    X = np.concatenate([r.x for r in records])
    XM = np.concatenate([r.x_mask for r in records]) & np.isfinite(X)
    Uv = np.concatenate([r.u for r in records])
    UM = np.isfinite(Uv)

    def moments(vals, mask):
        n = mask.sum(axis=0)
        safe = np.where(mask, vals, 0.0)
        mean = np.where(n > 0, safe.sum(axis=0) / np.maximum(n, 1), 0.0)
        var = np.where(mask, (vals - mean) ** 2, 0.0).sum(axis=0) / np.maximum(n, 1)
        return mean, np.maximum(np.sqrt(var), STD_FLOOR)

    om, os_ = moments(X, XM)
    im, is_ = moments(Uv, UM)
    return NormalizationStats(list(first.obs_channels), om, os_, list(first.int_channels), im, is_)


def _check_channels(stats: NormalizationStats, obs, ints):
    if list(obs) != stats.obs_channels or list(ints) != stats.int_channels:
        raise ValueError("normalisation statistics were fit on a different channel set")


def apply_normalization(obj, stats: NormalizationStats):
    """z-score a :class:`PatientRecord` (or :class:`ForecastResult` with channel lists)."""
    if isinstance(obj, ForecastResult):
        return _forecast_transform(obj, stats, forward=True)
    _check_channels(stats, obj.obs_channels, obj.int_channels)
    return obj.with_arrays(
        x=(obj.x - stats.obs_mean) / stats.obs_std,
        u=(obj.u - stats.int_mean) / stats.int_std,
    )


def invert_normalization(obj, stats: NormalizationStats):
    if isinstance(obj, ForecastResult):
        return _forecast_transform(obj, stats, forward=False)
    _check_channels(stats, obj.obs_channels, obj.int_channels)
    return obj.with_arrays(x=obj.x * stats.obs_std + stats.obs_mean, u=obj.u * stats.int_std + stats.int_mean)


def _forecast_transform(f: ForecastResult, stats: NormalizationStats, forward: bool) -> ForecastResult:
    if f.obs_mean.shape[1] != len(stats.obs_channels) or f.int_mean.shape[1] != len(stats.int_channels):
        raise ValueError("forecast dimensions do not match the normalisation channel set")
    os_, is_ = stats.obs_std, stats.int_std
    if forward:
        return ForecastResult(
            f.t_star, (f.obs_mean - stats.obs_mean) / os_, f.obs_var / os_**2,
            (f.int_mean - stats.int_mean) / is_, f.int_var / is_**2, f.patient_id, dict(f.meta),
        )
    return ForecastResult(
        f.t_star, f.obs_mean * os_ + stats.obs_mean, f.obs_var * os_**2,
        f.int_mean * is_ + stats.int_mean, f.int_var * is_**2, f.patient_id, dict(f.meta),
    )


def split_by_hash(patient_ids: Iterable[str], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  fold: int = 0, n_folds: int = 10) -> tuple[list[str], list[str], list[str]]:
    """Assign ids to (train, eval, test) by FNV-1a bucket, rotated per fold.

    ``bucket = fnv1a64(id) mod 100``; fold ``k`` shifts buckets by
    ``k * 100 // n_folds`` and the first slices of the rotated range become
    test then eval.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        seen, dups = set(), set()
        for i in ids:
            (dups if i in seen else seen).add(i)
        raise ValueError(f"duplicate patient id(s): {', '.join(sorted(dups))}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold {fold} outside 0..{n_folds - 1}")
    n_test = round(fractions[2] * 100)
    n_eval = round(fractions[1] * 100)
    shift = fold * (100 // n_folds)
    train, ev, test = [], [], []
    for pid in sorted(ids):
        rotated = (fnv1a64(pid) % 100 - shift) % 100
        if rotated < n_test:
            test.append(pid)
        elif rotated < n_test + n_eval:
            ev.append(pid)
        else:
            train.append(pid)
    return train, ev, test


def prepare_records(streams: Sequence[EventStream], obs_channels, int_channels, grid_step: float,
                    train_ids: Iterable[str], thresholds: dict[str, int] | None = None):
    """Grid, impute and normalise every stream with statistics from ``train_ids``.

    Order: grid; continue interventions (raw units, 0 = no action); fit
    z-scores on the training records; normalise; carry observations forward
    (leading gaps become the training mean, 0).
    """
    train_ids = set(train_ids)
    if thresholds is None:
        thresholds = intervention_gap_thresholds(
            [s for s in streams if s.patient_id in train_ids] or streams, int_channels, grid_step
        )
    gridded = [impute_interventions(discretize(s, grid_step, obs_channels, int_channels), thresholds) for s in streams]
    train = [r for r in gridded if r.patient_id in train_ids]
    stats = fit_normalization(train or gridded)
    prepared = [impute_observations(apply_normalization(r, stats)) for r in gridded]
    return prepared, stats, thresholds
