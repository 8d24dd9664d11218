import json

import numpy as np
import pytest

from conftest import diagonal_params, make_record
from ssmcast import diffmath as dm
from ssmcast import dssm, lgssm
from ssmcast.data import SyntheticConfig, simulate, split_by_hash
from ssmcast.lgssm import ForecastResult
from ssmcast.pipelines import (
    Adam,
    CheckpointEnvelope,
    CheckpointError,
    EvalConfig,
    TrainConfig,
    TrainingDivergedError,
    UnsupportedVersionError,
    cross_validate,
    evaluate_mae,
    load_checkpoint,
    save_checkpoint,
    sem,
    train,
)
from ssmcast.pipelines.checkpoint import checkpoint_text
from ssmcast.pipelines.train import make_batches

TINY = dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=1, hidden=6, lstm_hidden=5, combiner_hidden=6)


def linear_records(n, T, seed, params=None, prefix="r"):
    params = params or diagonal_params(2, 3, 1, seed)
    rng = np.random.default_rng(seed)
    return [make_record(*lgssm.sample_trajectory(params, T, rng)[:2], pid=f"{prefix}{k:03d}") for k in range(n)]


def tc(**kw):
    base = dict(strategy="hr", learning_rate=0.01, batch_size=4, epochs_si=3, epochs_tf=0, t_star=6, tau=4,
                eval_samples=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy():
    recs = linear_records(12, 12, 0)
    return recs[:8], recs[8:]


# --- optimiser and batching ----------------------------------------------


def test_adam_first_step_is_lr_sign():
    opt = Adam(lr=0.1, clip_norm=0)
    p = opt.step(dm.ParameterSet({"w": [1.0, -1.0]}), {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -0.9], atol=1e-6)


def test_adam_frozen_and_clipping():
    opt = Adam(lr=0.1, clip_norm=1.0)
    opt.freeze(["b"])
    p = opt.step(dm.ParameterSet({"a": [0.0], "b": [2.0]}), {"a": np.array([100.0]), "b": np.array([1.0])})
    assert p["b"][0] == 2.0
    assert p["a"][0] == pytest.approx(-0.1, abs=1e-6)
    with pytest.raises(FloatingPointError):
        opt.step(p, {"a": np.array([np.nan]), "b": np.array([0.0])})


def test_batching_deterministic_and_grouped():
    recs = linear_records(5, 6, 1) + linear_records(4, 9, 2, prefix="s")
    a = make_batches(recs, 3, np.random.default_rng(7))
    b = make_batches(recs, 3, np.random.default_rng(7))
    assert a == b
    assert sorted(k for batch in a for k in batch) == list(range(9))
    assert all(len({recs[k].T for k in batch}) == 1 for batch in a)


# --- training ------------------------------------------------------------


def test_threads_do_not_change_checkpoint(toy):
    tr, ev = toy
    one = train(tr, ev, tc(grad_chunk=2), TINY, threads=1).checkpoint
    four = train(tr, ev, tc(grad_chunk=2), TINY, threads=4).checkpoint
    assert checkpoint_text(one) == checkpoint_text(four)


def test_kf_strategy_reaches_true_loglik():
    true = diagonal_params(2, 3, 1, 5)
    recs = linear_records(150, 30, 5, true)
    tr, ev = recs[:100], recs[100:]
    res = train(tr, ev, TrainConfig(strategy="kf", kf_iterations=200, kf_learning_rate=0.05),
                dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=1))
    ref = lgssm.mean_loglik(true, ev)
    got = lgssm.mean_loglik(res.checkpoint.lgssm_params(), ev)
    assert got >= ref - 0.02 * abs(ref)
    assert [r.phase for r in res.curve] == ["kf"] * len(res.curve)


def test_si_elbo_trends_upward():
    recs = linear_records(20, 10, 4)
    res = train(recs, [], tc(strategy="si+tf", epochs_si=30, epochs_tf=1, patience=30, learning_rate=0.01,
                             batch_size=5), TINY)
    si = np.array([r.train_objective for r in res.curve if r.phase == "si"])
    smooth = np.convolve(si, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) >= -1e-3 * np.abs(smooth[:-1]))
    assert smooth[-1] > smooth[0]


def test_hr_differs_from_si_tf(toy):
    tr, ev = toy
    hr = train(tr, ev, tc(), TINY).checkpoint
    st = train(tr, ev, tc(strategy="si+tf", epochs_si=2, epochs_tf=1), TINY).checkpoint
    assert any(not np.array_equal(hr.tensors[k], st.tensors[k]) for k in hr.tensors)


def test_hr_never_reads_the_future(toy):
    tr, ev = toy

    def poison(r):
        x, u = r.x.copy(), r.u.copy()
        x[6:], u[6:] = np.nan, np.nan
        return r.with_arrays(x=x, u=u)

    clean = train(tr, ev, tc(), TINY).checkpoint
    dirty = train([poison(r) for r in tr], [poison(r) for r in ev], tc(), TINY).checkpoint
    assert checkpoint_text(clean) == checkpoint_text(dirty)


def test_incomplete_records_rejected(toy):
    tr, ev = toy
    x = tr[0].x.copy()
    x[-1, 0] = np.nan
    with pytest.raises(ValueError, match="not imputed"):
        train([tr[0].with_arrays(x=x)] + tr[1:], ev, tc(strategy="tf", epochs_si=1, epochs_tf=1), TINY)


def test_early_stopping_keeps_best(toy):
    tr, ev = toy
    res = train(tr, ev, tc(epochs_si=12, patience=2, learning_rate=0.05), TINY)
    evals = [r.eval_objective for r in res.curve]
    best = res.checkpoint.meta["best_eval"]
    assert best >= max(evals) - 1e-12
    assert len(res.curve) <= 12
    assert res.checkpoint.meta["epochs_run"] == len(res.curve)


def test_divergence_carries_last_good(toy):
    tr, ev = toy
    huge = [r.with_arrays(x=r.x * 1e170) for r in tr]
    with pytest.raises(TrainingDivergedError) as e:
        train(huge, [], tc(), TINY)
    env = e.value.last_good
    assert env is not None and "diverged" in env.meta
    init = dssm.init_params(TINY, 3)
    assert all(np.array_equal(env.tensors[k], init[k]) for k in init)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown strategy"):
        TrainConfig(strategy="xx")
    with pytest.raises(ValueError):
        TrainConfig(strategy="si+tf", epochs_si=0, epochs_tf=5)


# --- evaluation ----------------------------------------------------------


class StubEnv:
    """Returns a fixed forecast regardless of the record."""

    strategy, config, normalization = "stub", {}, None

    def __init__(self, fn):
        self.fn = fn

    def forecast(self, record, t_star, horizon, n_paths=1, seed=0):
        m = self.fn(record, t_star, horizon)
        return ForecastResult(t_star, m, np.ones_like(m), np.zeros((horizon, record.u.shape[1])),
                              np.ones((horizon, record.u.shape[1])))


def test_mae_zero_for_truth():
    recs = linear_records(4, 10, 0)
    env = StubEnv(lambda r, t, h: r.x[t:t + h])
    rep = evaluate_mae(env, recs, EvalConfig(t_star=4, horizons=(1, 6)))
    assert rep.metric(1).mae == 0.0 and rep.metric(6).mae == 0.0


def test_mae_hand_value():
    r = make_record(np.ones((3, 1)), np.zeros((3, 1)))
    env = StubEnv(lambda r, t, h: np.array([[0.0], [2.0]])[:h])
    assert evaluate_mae(env, [r], EvalConfig(t_star=1, horizons=(2,))).metric(2).mae == 1.0


def test_mae_order_invariant_and_counts_exclusions():
    recs = linear_records(5, 10, 0) + linear_records(2, 6, 1, prefix="short")
    env = StubEnv(lambda r, t, h: np.zeros((h, 3)))
    ec = EvalConfig(t_star=4, horizons=(2, 5))
    a = evaluate_mae(env, recs, ec)
    b = evaluate_mae(env, recs[::-1], ec)
    assert a.json_text() == b.json_text()
    assert (a.metric(2).n_records, a.metric(2).n_excluded) == (7, 0)
    assert (a.metric(5).n_records, a.metric(5).n_excluded) == (5, 2)


def test_sem():
    assert sem([1.0, 2.0, 3.0]) == pytest.approx(0.57735, abs=1e-5)
    assert np.isnan(sem([1.0]))


def test_cross_validation_structure():
    streams, _ = simulate(SyntheticConfig(n_patients=100, t_min=16, t_max=16, z_dim=2, o_dim=3, i_dim=1), 0)
    sc = SyntheticConfig(o_dim=3, i_dim=1)
    ids = [s.patient_id for s in streams]
    tests = [set(split_by_hash(ids, (0.5, 0.25, 0.25), k, 2)[2]) for k in range(2)]
    assert not tests[0] & tests[1]

    def run():
        return cross_validate(streams, sc.obs_channels(), sc.int_channels(),
                              TrainConfig(strategy="kf", kf_iterations=10), EvalConfig(t_star=8, horizons=(4, 8)),
                              dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=1), n_folds=2)

    rep = run()
    assert len(rep.folds) == 2 and rep.sem_basis == "folds"
    assert [f["n_test"] for f in rep.folds] == [len(tests[0]), len(tests[1])]
    assert len(rep.metric(4).fold_values) == 2
    assert rep.json_text() == run().json_text()


# --- checkpoints ---------------------------------------------------------


@pytest.fixture(scope="module")
def dssm_ckpt(toy):
    return train(*toy, tc(epochs_si=1), TINY).checkpoint


def test_checkpoint_roundtrip_forecast_identical(tmp_path, dssm_ckpt, toy):
    save_checkpoint(tmp_path / "m.json", dssm_ckpt)
    back = load_checkpoint(tmp_path / "m.json")
    r = toy[1][0]
    f1, f2 = dssm_ckpt.forecast(r, 6, 4, n_paths=8, seed=1), back.forecast(r, 6, 4, n_paths=8, seed=1)
    assert f1.obs_mean.tobytes() == f2.obs_mean.tobytes()
    assert checkpoint_text(back) == checkpoint_text(dssm_ckpt)


def test_checkpoint_shape_mismatch_names_tensor(dssm_ckpt):
    obj = dssm_ckpt.to_json()
    obj["tensors"]["theta/A/W0"] = CheckpointEnvelope(
        "x", "dssm", {"t": np.zeros((1, 1))}, {}, [], []).to_json()["tensors"]["t"]
    with pytest.raises(CheckpointError, match="theta/A/W0"):
        CheckpointEnvelope.from_json(obj)


def test_checkpoint_version_and_corruption(dssm_ckpt):
    obj = json.loads(checkpoint_text(dssm_ckpt))
    obj["format_version"] += 1
    with pytest.raises(UnsupportedVersionError):
        CheckpointEnvelope.from_json(obj)
    obj = json.loads(checkpoint_text(dssm_ckpt))
    obj["tensors"]["theta/logQ"]["data"] = "@@not base64@@"
    with pytest.raises(CheckpointError, match="corrupt base64"):
        CheckpointEnvelope.from_json(obj)


def test_lgssm_checkpoint_roundtrip():
    p = diagonal_params(2, 3, 1, 0)
    env = CheckpointEnvelope("kf", "lgssm", p.to_tensors(), {"z_dim": 2}, ["a", "b", "c"], ["d"])
    back = CheckpointEnvelope.from_json(json.loads(checkpoint_text(env)))
    r = linear_records(1, 8, 0)[0]
    assert back.forecast(r, 4, 4).obs_mean.tobytes() == env.forecast(r, 4, 4).obs_mean.tobytes()
