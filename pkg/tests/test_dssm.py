import math

import numpy as np
import pytest

from conftest import diagonal_params, make_record
from ssmcast import diffmath as dm
from ssmcast import dssm, lgssm

SMALL = dict(hidden=5, lstm_hidden=4, combiner_hidden=5)


def zero_params(cfg):
    return dssm.init_params(cfg, 0).updated({k: np.zeros(s) for k, s in dssm.parameter_shapes(cfg).items()})


def linear_cfg(z, o, i, **kw):
    return dssm.DssmConfig(z_dim=z, o_dim=o, i_dim=i, n_layers=1, **{**SMALL, **kw})


# --- networks ------------------------------------------------------------


def test_zero_encoder():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=1, **SMALL)
    h = dssm.encode(make_record(np.zeros((4, 3)), np.zeros((4, 1))), 4, zero_params(cfg), cfg)
    assert h.shape == (4, 4) and not h.any()


def test_encoder_single_step_is_one_cell():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 3)
    r = make_record(np.random.default_rng(0).normal(size=(3, 3)), [[0.5], [0.1], [0.2]])
    h = dssm.encode(r, 1, p, cfg)
    inp = np.concatenate([r.x[0], r.u[0]])[None]
    ref, _ = dssm.lstm_cell(p, inp, np.zeros((1, 4)), np.zeros((1, 4)), 4)
    np.testing.assert_array_equal(h[0], ref[0])


def test_zero_combiner_standard_normal():
    cfg = dssm.DssmConfig(z_dim=3, o_dim=2, i_dim=1, **SMALL)
    m, v = dssm.posterior_step(np.ones((1, 4)), np.ones((1, 3)), zero_params(cfg), cfg)
    assert not m.any() and np.all(v == 1.0)


def test_zero_prior_and_initial_prior():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=2, **SMALL)
    p = zero_params(cfg).updated({"theta/logQ": np.log([0.3, 2.0]), "theta/m0": [1.0, -1.0],
                                  "theta/logP0": np.log([0.5, 4.0])})
    m, v = dssm.prior_step(np.ones((1, 2)), np.ones((1, 2)), p, cfg)
    assert not m.any()
    np.testing.assert_allclose(v, [0.3, 2.0], rtol=1e-15)
    m, v = dssm.prior_step(None, np.full((1, 2), 7.0), p, cfg, first=True)
    assert m.tolist() == [1.0, -1.0]
    np.testing.assert_allclose(v, [0.5, 4.0], rtol=1e-15)


def test_zero_emissions():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=2, **SMALL)
    p = zero_params(cfg)
    assert not dssm.emit_observation(np.ones((1, 2)), p, cfg)[0].any()
    assert not dssm.emit_intervention(np.ones((1, 2)), p, cfg)[0].any()


def test_linear_nets_match_lgssm():
    lg = diagonal_params(3, 4, 2, 5)
    cfg = linear_cfg(3, 4, 2)
    p = dssm.from_lgssm(lg, cfg)
    rng = np.random.default_rng(0)
    z, u = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    m, v = dssm.prior_step(z, u, p, cfg)
    np.testing.assert_allclose(m[0], lg.A @ z[0] + lg.B @ u[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(v, np.diag(lg.Q), atol=1e-12)
    np.testing.assert_allclose(dssm.emit_observation(z, p, cfg)[0][0], lg.C @ z[0], atol=1e-12)
    np.testing.assert_allclose(dssm.emit_intervention(z, p, cfg)[0][0], lg.D @ z[0], atol=1e-12)


def test_from_lgssm_requires_linear_diagonal():
    lg = lgssm.LgssmParams.random(2, 2, 1, 0)
    with pytest.raises(ValueError, match="diagonal"):
        dssm.from_lgssm(lg, linear_cfg(2, 2, 1))
    with pytest.raises(ValueError, match="single-layer"):
        dssm.from_lgssm(diagonal_params(2, 2, 1, 0), dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1))


def test_check_params_names_tensor():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg).updated({"theta/C/W0": np.zeros((7, 7))})
    with pytest.raises(lgssm.DimensionError, match="theta/C/W0"):
        dssm.check_params(p, cfg)


def test_config_json_roundtrip():
    cfg = dssm.DssmConfig(z_dim=4, o_dim=3, i_dim=2, hidden=9, skip_initial_kl=True)
    assert dssm.DssmConfig.from_json(cfg.to_json()) == cfg


# --- system-identification ELBO -----------------------------------------


def _scalar_posterior_params(cfg, lg, x):
    """Single-step model whose q(z_1) is the exact posterior given x_1."""
    post, ll = lgssm.kf_step_update(lgssm.GaussianBelief(lg.m0, lg.P0), x[0], lg)
    p = dssm.from_lgssm(lg, cfg)
    p = p.updated({k: np.zeros_like(v) for k, v in p.items() if k.startswith("phi/comb/W")})
    last = f"phi/comb/b{cfg.combiner_layers - 1}"
    return p.updated({last: np.array([post.mean[0], math.log(post.cov[0, 0])])}), post, ll


def test_one_step_analytic_bound_and_exactness():
    lg = lgssm.LgssmParams(A=[[0.9]], B=[[0.3]], C=[[1.5]], D=[[0.2]], Q=[[0.4]], R=[[0.3]], U=[[0.5]],
                           m0=[0.2], P0=[[1.1]])
    cfg = linear_cfg(1, 1, 1, combiner_layers=1)
    x, u = np.array([[0.7]]), np.array([[0.0]])
    p, post, ll = _scalar_posterior_params(cfg, lg, x)
    # two antithetic draws make E[eps] = 0 and E[eps^2] = 1 exact
    noise = dssm.NoisePlan(0, np.array([1.0, -1.0]).reshape(2, 1, 1, 1), np.zeros((2, 1, 1, 1)))
    b = dssm.elbo_system_id(x, u, p, cfg, noise)
    m, v = post.mean[0], post.cov[0, 0]
    c, r = 1.5, 0.3
    recon = -0.5 * (math.log(2 * math.pi * r) + ((0.7 - c * m) ** 2 + c * c * v) / r)
    kl = 0.5 * (math.log(1.1 / v) + (v + (m - 0.2) ** 2) / 1.1 - 1)
    assert b.values()["obs_recon"] == pytest.approx(recon, abs=1e-12)
    assert b.values()["kl"] == pytest.approx(kl, abs=1e-12)
    assert b.values()["elbo"] == pytest.approx(ll, abs=1e-12)


def test_kl_zero_when_posterior_is_prior():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, combiner_layers=1, **SMALL)
    p = dssm.init_params(cfg, 1)
    p = p.updated({"phi/comb/W0": np.zeros_like(p["phi/comb/W0"]),
                   "phi/comb/b0": np.concatenate([p["theta/m0"], p["theta/logP0"]])})
    b = dssm.elbo_system_id(np.zeros((1, 2)), np.zeros((1, 1)), p, cfg, dssm.NoisePlan.generate(0, 3, 1, 1, 2, 1))
    assert abs(b.values()["kl"]) < 1e-15


def test_strict_mode_drops_first_kl():
    base = dict(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    loose, strict = dssm.DssmConfig(**base), dssm.DssmConfig(**base, skip_initial_kl=True)
    p = dssm.init_params(loose, 2)
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    n = dssm.NoisePlan.generate(0, 2, 1, 4, 2, 1)
    a, b = dssm.elbo_system_id(x, u, p, loose, n), dssm.elbo_system_id(x, u, p, strict, n)
    assert a.kl_t.shape == (4,) and b.kl_t.shape == (3,)
    np.testing.assert_allclose(a.kl_t[1:], b.kl_t, atol=1e-15)


@pytest.mark.parametrize("forecast", [False, True])
def test_elbo_identity(forecast):
    cfg = dssm.DssmConfig(z_dim=2, o_dim=3, i_dim=2, **SMALL)
    p = dssm.init_params(cfg, 4)
    rng = np.random.default_rng(1)
    x, u = rng.normal(size=(3, 6, 3)), rng.normal(size=(3, 6, 2))
    n = dssm.NoisePlan.generate(5, 4, 3, 6, 2, 2)
    b = dssm.elbo_forecast(x, u, 3, 3, p, cfg, n) if forecast else dssm.elbo_system_id(x, u, p, cfg, n)
    v = b.values()
    assert abs(v["obs_recon"] + v["int_recon"] - v["kl"] - v["elbo"]) < 1e-12
    assert abs(b.per_sample.mean() - v["elbo"]) < 1e-10


def test_sample_count_does_not_shift_expectation():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 6)
    rng = np.random.default_rng(2)
    x, u = rng.normal(size=(5, 2)), rng.normal(size=(5, 1))
    a = dssm.elbo_system_id(x, u, p, cfg, dssm.NoisePlan.generate(1, 64, 1, 5, 2, 1))
    b = dssm.elbo_system_id(x, u, p, cfg, dssm.NoisePlan.generate(2, 4096, 1, 5, 2, 1))
    assert abs(a.values()["elbo"] - b.values()["elbo"]) < 4 * math.hypot(a.stderr, b.stderr)


def test_nonfinite_reports_time_step():
    cfg = dssm.DssmConfig(z_dim=1, o_dim=1, i_dim=1, **SMALL)
    p = dssm.init_params(cfg).updated({"theta/logR": np.array([800.0])})
    x = np.zeros((3, 1))
    with pytest.raises(dm.NonFiniteError, match="time step"):
        dm.value_and_gradient(lambda q: dssm.elbo_system_id(x, x, q, cfg, dssm.NoisePlan.zeros(1, 1, 3, 1, 1)).elbo, p)


def test_elbo_gradients_fd():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, hidden=3, lstm_hidden=3, combiner_hidden=3)
    p = dssm.init_params(cfg, 9)
    rng = np.random.default_rng(3)
    x, u = rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
    n = dssm.NoisePlan.generate(0, 2, 1, 3, 2, 1)
    rep = dm.finite_difference_check(lambda q: dssm.elbo_system_id(x, u, q, cfg, n).elbo, p, tolerance=1e-5)
    assert rep.passed, rep.flagged[:3]
    rep = dm.finite_difference_check(lambda q: dssm.elbo_forecast(x, u, 1, 2, q, cfg, n).elbo, p, tolerance=1e-5)
    assert rep.passed, rep.flagged[:3]


# --- forecast ELBO -------------------------------------------------------


def test_empty_horizon():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 1)
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    n = dssm.NoisePlan.generate(0, 3, 1, 4, 2, 1)
    f = dssm.elbo_forecast(x, u, 4, 0, p, cfg, n)
    assert f.values()["obs_recon"] == 0 and f.values()["int_recon"] == 0
    s = dssm.elbo_system_id(x, u, p, cfg, n)
    assert f.values()["kl"] == pytest.approx(s.values()["kl"], abs=1e-12)


def test_forecast_elbo_ignores_future_inputs_beyond_tau():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 1)
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=(8, 2)), rng.normal(size=(8, 1))
    n = dssm.NoisePlan.generate(0, 2, 1, 8, 2, 1)
    a = dssm.elbo_forecast(x, u, 3, 2, p, cfg, n)
    x2 = x.copy()
    x2[5:] = 1e3
    b = dssm.elbo_forecast(x2, u, 3, 2, p, cfg, n)
    assert a.values()["elbo"] == b.values()["elbo"]


def test_deterministic_system_reaches_floor_bound():
    floor = 1e-6
    lg = diagonal_params(2, 3, 1, 3)
    cfg = linear_cfg(2, 3, 1, var_floor=floor, combiner_layers=1)
    tiny = np.log(floor / 10)
    p = dssm.from_lgssm(lg, cfg)
    p = p.updated({
        "theta/logQ": np.full(2, tiny), "theta/logR": np.full(3, tiny), "theta/logU": np.full(1, tiny),
        "phi/comb/W0": np.zeros_like(p["phi/comb/W0"]),
        "phi/comb/b0": np.concatenate([lg.m0, np.full(2, tiny)]),
    })
    # noiseless trajectory started at m0 with u_t = D z_{t-1}
    T, tau = 6, 5
    z = lg.m0.copy()
    xs, us = [lg.C @ z], [np.zeros(1)]
    for _ in range(T - 1):
        un = lg.D @ z
        z = lg.A @ z + lg.B @ un
        xs.append(lg.C @ z)
        us.append(un)
    x, u = np.array(xs), np.array(us)
    best_obs = tau * 3 * -0.5 * math.log(2 * math.pi * floor)
    best_int = tau * 1 * -0.5 * math.log(2 * math.pi * floor)
    exact = dssm.elbo_forecast(x, u, 1, tau, p, cfg, dssm.NoisePlan.zeros(1, 1, T, 2, 1))
    assert exact.values()["obs_recon"] == pytest.approx(best_obs, abs=1e-6)
    assert exact.values()["int_recon"] == pytest.approx(best_int, abs=1e-6)
    noisy = dssm.elbo_forecast(x, u, 1, tau, p, cfg, dssm.NoisePlan.generate(0, 64, 1, T, 2, 1))
    gap = best_obs - noisy.values()["obs_recon"]
    assert 0 <= gap < 5 * tau * 3  # a few nats per cell, against ~6.9 for the bound itself


# --- Monte Carlo forecast -----------------------------------------------


def test_forecast_rerun_bit_identical():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 2)
    r = make_record(np.random.default_rng(0).normal(size=(6, 2)), np.zeros((6, 1)), pid="x1")
    a = dssm.forecast(r, 4, 3, p, cfg, n_paths=1, seed=7)
    b = dssm.forecast(r, 4, 3, p, cfg, n_paths=1, seed=7)
    assert a.obs_mean.tobytes() == b.obs_mean.tobytes() and a.int_var.tobytes() == b.int_var.tobytes()
    c = dssm.forecast(r, 4, 3, p, cfg, n_paths=1, seed=8)
    assert c.obs_mean.tobytes() != a.obs_mean.tobytes()


def test_forecast_standard_error_scaling():
    cfg = dssm.DssmConfig(z_dim=2, o_dim=2, i_dim=1, **SMALL)
    p = dssm.init_params(cfg, 2)
    r = make_record(np.random.default_rng(0).normal(size=(6, 2)), np.zeros((6, 1)))
    r_var = np.exp(p["theta/logR"])

    def se(n):
        f = dssm.forecast(r, 4, 2, p, cfg, n_paths=n, seed=1)
        return np.sqrt((f.obs_var - r_var) / n).mean()

    assert se(256) / se(1024) == pytest.approx(2.0, rel=0.3)


def test_forecast_linear_zero_noise_matches_kf():
    lg = diagonal_params(3, 4, 2, 7)
    cfg = linear_cfg(3, 4, 2)
    p = dssm.from_lgssm(lg, cfg)
    x, u, _ = lgssm.sample_trajectory(lg, 10, np.random.default_rng(1))
    r = make_record(x, u)
    beliefs, _ = lgssm.kf_filter(r, lg)
    ref = lgssm.kf_forecast(r, 6, 4, lg)
    out = dssm.forecast(r, 6, 4, p, cfg, n_paths=1, start_state=beliefs[5].mean, zero_noise=True)
    np.testing.assert_allclose(out.obs_mean, ref.obs_mean, atol=1e-6)
    np.testing.assert_allclose(out.int_mean, ref.int_mean, atol=1e-6)


def test_forecast_validation():
    cfg = dssm.DssmConfig(z_dim=1, o_dim=1, i_dim=1, **SMALL)
    p = dssm.init_params(cfg)
    r = make_record(np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        dssm.forecast(r, 2, 1, p, cfg, n_paths=0)
    with pytest.raises(ValueError):
        dssm.forecast(r, 5, 1, p, cfg)
