from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import gammaln

from smds.errors import ConfigError, FilterError
from smds.learning import (
    EmConfig,
    EmTrace,
    FitAborted,
    e_step,
    em_fit,
    expected_loglik,
    init_params,
    m_step,
    m_step_poisson,
    restrict_to_modality,
)
from smds.model import MultiscaleSeries, RegimeParams, SwitchingModel, validate_model
from smds.simulate import make_rng, simulate_series, simulate_system
from smds.smoothing import SmoothedStats

from conftest import gaussian_model, small_config
from oracles import poisson_glm_irls, rts_oracle


def stats_from_moments(x, P, cross):
    """Single-regime smoother output with the given moments (``x``, ``P`` are T+1 long)."""
    T = x.shape[0] - 1
    d = x.shape[1]
    return SmoothedStats(
        x=x, P=P, x_reg=x[:, None], P_reg=P[:, None], W=np.ones((T, 1)), Wpair=np.ones((T - 1, 1, 1)),
        J=np.zeros((T, 1, d, d)), cross=cross[:, None],
    )


def empty_series(T, fields=None, mask=None):
    F = 0 if fields is None else fields.shape[1]
    return MultiscaleSeries(
        spikes=np.zeros((T, 0), int),
        fields=np.zeros((T, 0)) if fields is None else fields,
        field_mask=np.ones(T, bool) if mask is None else mask,
    )


def one_regime_model(d, F=0, C=None, R=None):
    reg = RegimeParams(A=np.eye(d), Q=np.eye(d), alpha=np.zeros(0), beta=np.zeros((0, d)),
                       C=np.zeros((F, d)) if C is None else C, R=np.eye(F) if R is None else R)
    return SwitchingModel(regimes=[reg], Phi=[[1.0]], pi0=[1.0], mu0=np.zeros(d), Lambda0=np.eye(d))


# -- M-step -------------------------------------------------------------------------

def test_scalar_dynamics_arithmetic():
    # sum <x_t x_{t-1}> = 1 + 3 = 4 and sum <x_{t-1}^2> = 3 + 5 = 8
    x = np.zeros((3, 1))
    P = np.array([3.0, 5.0, 2.0]).reshape(3, 1, 1)
    cross = np.array([1.0, 3.0]).reshape(2, 1, 1)
    model, _ = m_step(stats_from_moments(x, P, cross), empty_series(2), EmConfig(d=1), one_regime_model(1))
    np.testing.assert_allclose(model.regimes[0].A, [[0.5]], rtol=1e-8)


def propagated_moments(A, Q, mu0, L0, T):
    """Exact prior moments of a linear-Gaussian chain: means, covariances, lag-one moments."""
    d = A.shape[0]
    x = np.empty((T + 1, d))
    P = np.empty((T + 1, d, d))
    cross = np.empty((T, d, d))
    x[0], P[0] = mu0, L0
    for t in range(1, T + 1):
        x[t] = A @ x[t - 1]
        P[t] = A @ P[t - 1] @ A.T + Q
        cross[t - 1] = A @ (np.outer(x[t - 1], x[t - 1]) + P[t - 1])
    return x, P, cross


def test_exact_moments_recover_dynamics(rng):
    true = gaussian_model(rng, M=1, d=3, F=2).regimes[0]
    x, P, cross = propagated_moments(true.A, true.Q, rng.standard_normal(3), np.eye(3), 200)
    model, notes = m_step(stats_from_moments(x, P, cross), empty_series(200), EmConfig(d=3), one_regime_model(3))
    r = model.regimes[0]
    np.testing.assert_allclose(r.A, true.A, atol=1e-6)
    np.testing.assert_allclose(r.Q, true.Q, atol=1e-5)
    assert notes == []


def orthogonal_residuals(U, R, rng):
    """Residuals with zero sample cross-moment against ``U`` and sample covariance exactly ``R``."""
    N, F = U.shape[0], R.shape[0]
    E = rng.standard_normal((N, F))
    E -= U @ np.linalg.lstsq(U, E, rcond=None)[0]
    L = np.linalg.cholesky(E.T @ E / N)
    return E @ np.linalg.inv(L).T @ np.linalg.cholesky(R).T


def test_exact_moments_recover_observation(rng):
    true = gaussian_model(rng, M=1, d=3, F=4).regimes[0]
    T = 300
    x = rng.standard_normal((T + 1, 3))
    mask = np.arange(T) % 3 == 0
    Y = np.full((T, 4), np.nan)
    Y[mask] = x[1:][mask] @ true.C.T + orthogonal_residuals(x[1:][mask], true.R, rng)
    stats = stats_from_moments(x, np.zeros((T + 1, 3, 3)), np.zeros((T, 3, 3)))
    model, _ = m_step(stats, empty_series(T, Y, mask), EmConfig(d=3), one_regime_model(3, F=4))
    np.testing.assert_allclose(model.regimes[0].C, true.C, atol=1e-6)
    np.testing.assert_allclose(model.regimes[0].R, true.R, atol=1e-5)


def test_field_sums_ignore_missing_frames(rng):
    T = 60
    x = rng.standard_normal((T + 1, 2))
    mask = np.arange(T) % 2 == 0
    Y = np.where(mask[:, None], x[1:] @ np.array([[1.0, -2.0]]).T, np.nan)
    garbage = Y.copy()
    garbage[~mask] = 1e6
    stats = stats_from_moments(x, np.zeros((T + 1, 2, 2)), np.zeros((T, 2, 2)))
    prev = one_regime_model(2, F=1)
    a, _ = m_step(stats, empty_series(T, Y, mask), EmConfig(d=2), prev)
    b, _ = m_step(stats, empty_series(T, garbage, mask), EmConfig(d=2), prev)
    np.testing.assert_array_equal(a.regimes[0].C, b.regimes[0].C)


def poisson_data(rng, N=2000, d=3, C=4):
    X = rng.standard_normal((N, d)) * 0.5
    beta = rng.standard_normal((C, d)) * 0.4
    alpha = rng.uniform(-2.5, -1.0, C)
    n = rng.poisson(np.exp(alpha + X @ beta.T))
    return X, n, alpha, beta


def test_poisson_zero_covariance_matches_glm(rng):
    X, n, _, _ = poisson_data(rng)
    w = rng.uniform(0.2, 1.0, X.shape[0])
    a, b, info = m_step_poisson(n, X, np.zeros((X.shape[0], 3, 3)), w, np.full(4, -2.0), np.zeros((4, 3)))
    for c in range(4):
        a_ref, b_ref = poisson_glm_irls(X, n[:, c], w)
        assert a[c] == pytest.approx(a_ref, abs=1e-6)
        np.testing.assert_allclose(b[c], b_ref, atol=1e-6)
    assert np.all(info["grad_norm"] < 1e-8)


def test_poisson_alpha_only_closed_form(rng):
    N = 500
    n = rng.poisson(0.3, (N, 2))
    w = rng.uniform(0, 1, N)
    a, b, info = m_step_poisson(n, np.zeros((N, 2)), np.zeros((N, 2, 2)), w, np.zeros(2), np.zeros((2, 2)))
    np.testing.assert_allclose(a, np.log(w @ n / w.sum()), atol=1e-10)
    np.testing.assert_array_equal(b, 0.0)


def test_poisson_with_covariance_matches_generic_optimizer(rng):
    X, n, _, _ = poisson_data(rng, N=800, C=1)
    N = X.shape[0]
    S = np.array([[0.2, 0.05, 0.0], [0.05, 0.1, 0.0], [0.0, 0.0, 0.3]])
    w = rng.uniform(0.5, 1.0, N)
    a, b, info = m_step_poisson(n, X, np.repeat(S[None], N, 0), w, np.array([-2.0]), np.zeros((1, 3)))

    def neg(theta):
        eta = theta[0] + X @ theta[1:]
        return -np.sum(w * (n[:, 0] * eta - np.exp(eta + 0.5 * theta[1:] @ S @ theta[1:])))

    ref = minimize(neg, np.zeros(4), method="BFGS", options={"gtol": 1e-9}).x
    np.testing.assert_allclose(np.r_[a, b[0]], ref, atol=1e-5)
    assert info["grad_norm"][0] < 1e-8


def test_poisson_objective_never_decreases(rng):
    X, n, _, _ = poisson_data(rng)
    N = X.shape[0]
    Sig = np.repeat(0.1 * np.eye(3)[None], N, 0)
    _, _, info = m_step_poisson(n, X, Sig, np.ones(N), np.full(4, 1.0), rng.standard_normal((4, 3)))
    hist = info["objective"]
    slack = 1e-12 * np.abs(hist[:-1]).max()
    assert np.all(np.diff(hist, axis=0) >= -slack)
    assert info["iters"] > 1


def test_poisson_overflowing_start_recovers(rng):
    X, n, _, _ = poisson_data(rng, C=1)
    N = X.shape[0]
    a, b, info = m_step_poisson(n, X, np.zeros((N, 3, 3)), np.ones(N), np.array([400.0]), np.zeros((1, 3)))
    a_ref, b_ref = poisson_glm_irls(X, n[:, 0])
    assert a[0] == pytest.approx(a_ref, abs=1e-6)


def test_degenerate_regime_keeps_parameters(switching_system):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    W = np.zeros_like(stats.W)
    W[:, 0] = 1.0
    Wpair = np.zeros_like(stats.Wpair)
    Wpair[:, 0, 0] = 1.0
    forced = replace(stats, W=W, Wpair=Wpair)
    new, notes = m_step(forced, series, EmConfig(M=2, d=4), model)
    assert len(notes) == 1 and "regime 2" in notes[0]
    assert new.regimes[1] is model.regimes[1]
    for r in new.regimes:
        assert all(np.all(np.isfinite(getattr(r, k))) for k in ("A", "Q", "alpha", "beta", "C", "R"))
    assert validate_model(new) == []


@pytest.mark.parametrize("share", [False, True])
def test_m_step_output_validates(switching_system, share):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    new, _ = m_step(stats, series, EmConfig(M=2, d=4, share_observation_params=share), model)
    assert validate_model(new) == []
    np.testing.assert_allclose(new.Phi.sum(axis=0), 1.0, atol=1e-12)
    if share:
        a, b = new.regimes
        np.testing.assert_array_equal(a.C, b.C)
        np.testing.assert_array_equal(a.beta, b.beta)


def test_transition_update_is_column_normalized_pair_counts(switching_system):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    new, _ = m_step(stats, series, EmConfig(M=2, d=4), model)
    counts = stats.Wpair.sum(axis=0)
    np.testing.assert_allclose(new.Phi, counts / counts.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(new.pi0, stats.W[0], atol=1e-12)


# -- expected complete-data log-likelihood -----------------------------------------

def test_dynamics_and_field_terms_match_lgssm_oracle(rng):
    model = gaussian_model(rng, M=1, d=3, F=4)
    series = simulate_series(model, 200, make_rng(40))
    stats, _, _ = e_step(model, series)
    r = model.regimes[0]
    xs, Ps, _, Pf = rts_oracle(r.A, r.Q, r.C, r.R, model.mu0, model.Lambda0, series.fields, series.field_mask)
    Qi = np.linalg.inv(r.Q)
    dyn = 0.0
    for t in range(1, series.T + 1):
        P_prev = model.Lambda0 if t == 1 else Pf[t - 2]
        G = P_prev @ r.A.T @ np.linalg.inv(r.A @ P_prev @ r.A.T + r.Q)
        Ex1 = Ps[t] + np.outer(xs[t], xs[t])
        Ex0 = Ps[t - 1] + np.outer(xs[t - 1], xs[t - 1])
        Ex10 = Ps[t] @ G.T + np.outer(xs[t], xs[t - 1])
        inner = Ex1 - r.A @ Ex10.T - Ex10 @ r.A.T + r.A @ Ex0 @ r.A.T
        dyn += -0.5 * np.trace(Qi @ inner) - 0.5 * np.linalg.slogdet(2 * np.pi * r.Q)[1]
    Ri = np.linalg.inv(r.R)
    fld = 0.0
    for t in np.flatnonzero(series.field_mask):
        y, m, S = series.fields[t], xs[t + 1], Ps[t + 1]
        res = y - r.C @ m
        fld += -0.5 * (res @ Ri @ res + np.trace(Ri @ r.C @ S @ r.C.T)) - 0.5 * np.linalg.slogdet(2 * np.pi * r.R)[1]
    terms = expected_loglik(model, series, stats)
    assert terms["dynamics"] == pytest.approx(dyn, rel=1e-10)
    assert terms["fields"] == pytest.approx(fld, rel=1e-10)


def test_poisson_term_at_zero_covariance(switching_system):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    flat = replace(stats, P_reg=np.zeros_like(stats.P_reg))
    P = model.stacked()
    n = series.spikes
    eta = P["alpha"][None] + np.einsum("jcd,tjd->tjc", P["beta"], flat.x_reg[1:])
    plain = np.sum(stats.W[:, :, None] * (n[:, None] * eta - np.exp(eta) - gammaln(n + 1)[:, None]))
    assert expected_loglik(model, series, flat)["spikes"] == pytest.approx(plain, rel=1e-12)


def test_zero_tau_drops_field_term(switching_system):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    assert expected_loglik(model.with_tau(0.0), series, stats)["fields"] == 0.0


def test_field_term_scales_with_tau(switching_system):
    model, series = switching_system
    stats, _, _ = e_step(model, series)
    base = expected_loglik(model, series, stats)["fields"]
    assert expected_loglik(model.with_tau(0.3), series, stats)["fields"] == pytest.approx(0.3 * base)


# -- initialization -----------------------------------------------------------------

def test_init_examples():
    sim = simulate_system(small_config(M=2), seed=3)
    series = sim.train
    spikes = series.spikes.copy()
    spikes[:, 0] = 0
    spikes[:, 0][: round(0.06 * series.T)] = 1
    spikes[:, 1] = 0
    series = replace(series, spikes=spikes)
    model = init_params(EmConfig(M=2, d=4), series, make_rng(0))
    for r in model.regimes:
        np.testing.assert_array_equal(r.A, 0.9 * np.eye(4))
        np.testing.assert_array_equal(r.Q, np.eye(4))
        assert r.alpha[0] == pytest.approx(np.log(0.06))
        assert r.alpha[1] == pytest.approx(np.log(1 / series.T))
        np.testing.assert_allclose(np.diag(r.R), np.var(series.fields[series.field_mask], axis=0))
    np.testing.assert_allclose(model.Phi, [[0.995, 0.005], [0.005, 0.995]])
    np.testing.assert_array_equal(model.pi0, [0.5, 0.5])
    np.testing.assert_array_equal(model.mu0, 0.0)
    np.testing.assert_array_equal(model.Lambda0, np.eye(4))


def test_init_draw_scale():
    sim = simulate_system(small_config(M=1, C=400, F=400), seed=4)
    r = init_params(EmConfig(M=1, d=4), sim.train, make_rng(1)).regimes[0]
    assert np.std(r.beta) == pytest.approx(0.1, rel=0.05)
    assert np.std(r.C) == pytest.approx(0.1, rel=0.05)


def test_same_start_across_modalities():
    sim = simulate_system(small_config(M=2), seed=5)
    full = init_params(EmConfig(M=2, d=4), sim.train, make_rng(9))
    gm, gs = restrict_to_modality(full, sim.train, "gaussian-only")
    pm, ps = restrict_to_modality(full, sim.train, "poisson-only")
    assert gm.n_neurons == 0 and gs.n_neurons == 0 and pm.n_features == 0 and ps.n_features == 0
    np.testing.assert_array_equal(gm.regimes[1].C, full.regimes[1].C)
    np.testing.assert_array_equal(pm.regimes[1].beta, full.regimes[1].beta)


def test_init_rejects_empty_series():
    with pytest.raises(ConfigError):
        init_params(EmConfig(), empty_series(0), make_rng(0))


def test_config_validation():
    for bad in (dict(M=0), dict(tau=0.0), dict(d=0), dict(modality="spikes")):
        with pytest.raises(ConfigError):
            EmConfig(**bad).validate()


# -- EM loop -------------------------------------------------------------------------

def test_gaussian_em_monotone():
    sim = simulate_system(small_config(M=1, T_train=600), seed=6)
    _, trace = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=30, modality="gaussian-only"))
    e = np.array(trace.elbo)
    assert np.all(np.diff(e) >= -1e-8 * np.abs(e[1:]))
    assert e[-1] > e[0]


def test_share_flag_irrelevant_for_one_regime():
    sim = simulate_system(small_config(M=1), seed=7)
    a, ta = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=3, share_observation_params=False))
    b, tb = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=3, share_observation_params=True))
    assert ta.elbo == tb.elbo
    for ra, rb in zip(a.regimes, b.regimes):
        np.testing.assert_array_equal(ra.beta, rb.beta)
        np.testing.assert_array_equal(ra.R, rb.R)


def test_fit_is_deterministic_and_traced(tmp_path):
    sim = simulate_system(small_config(M=2), seed=8)
    cfg = EmConfig(M=2, d=4, max_iters=3, seed=2)
    a, ta = em_fit(sim.train, cfg)
    b, tb = em_fit(sim.train, cfg)
    assert ta.elbo == tb.elbo
    np.testing.assert_array_equal(a.Phi, b.Phi)
    assert len(ta) == 3 and len(ta.loglik) == 3
    ta.write(tmp_path / "fit.log")
    lines = (tmp_path / "fit.log").read_text().splitlines()
    assert lines[0] == "iter,elbo_proxy,delta_params,seconds"
    assert float(lines[2].split(",")[1]) == ta.elbo[1]


def test_modality_restriction_in_fit():
    sim = simulate_system(small_config(M=1), seed=9)
    g, _ = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=1, modality="gaussian-only"))
    p, _ = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=1, modality="poisson-only"))
    assert (g.n_neurons, g.n_features) == (0, 5)
    assert (p.n_neurons, p.n_features) == (6, 0)


def test_early_stop():
    sim = simulate_system(small_config(M=1, T_train=400), seed=10)
    _, trace = em_fit(sim.train, EmConfig(M=1, d=4, max_iters=200, modality="gaussian-only",
                                          convergence_tol=1e-3))
    assert 6 <= len(trace) < 200


def test_callback_sees_each_iteration():
    sim = simulate_system(small_config(M=1), seed=11)
    seen = []
    em_fit(sim.train, EmConfig(M=1, d=4, max_iters=2), callback=lambda k, m, tr: seen.append((k, len(tr))))
    assert seen == [(1, 1), (2, 2)]


def test_abort_carries_trace():
    sim = simulate_system(small_config(M=1), seed=12)
    cfg = EmConfig(M=1, d=4, max_iters=5)
    init = init_params(cfg, sim.train, make_rng(0))
    r = init.regimes[0]
    bad = replace(init, regimes=(replace(r, alpha=r.alpha + 45.0),))
    with pytest.raises(FitAborted) as info:
        em_fit(sim.train, cfg, init=bad)
    assert isinstance(info.value.__cause__, FilterError)
    assert isinstance(info.value.trace, EmTrace) and len(info.value.trace) == 0
    assert info.value.trace.aborted.startswith("iteration 1")
