"""Acceptance criteria 1-11, each reported as one PASS/FAIL line.

The simulation studies (criteria 7-9) run a reduced protocol by default:
10 systems, 5000 training and test steps, and a fixed EM iteration budget.
Set ``SMDS_FULL_SCALE=1`` for 30 systems of 10000 steps and 300 iterations,
and ``SMDS_WORKERS=k`` to spread systems over ``k`` processes.
"""

import itertools
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from smds.bundle import read_bundle, write_bundle
from smds.evaluate import bh_correct, paired_test, predictive_power, regime_accuracy
from smds.filtering import (
    cubature_points,
    kf_update,
    msnf_predict,
    msnf_update,
    pcf_moments,
    pcf_update,
    smsnf_filter,
)
from smds.harness import ExperimentConfig, run, simulation_study
from smds.learning import EmConfig, em_fit, m_step, m_step_poisson
from smds.model import GaussianBelief, MultiscaleSeries, RegimeParams, SwitchingModel
from smds.simulate import SimConfig, make_rng, random_behavior_map, random_switching_model, simulate_series, simulate_system
from smds.smoothing import sms_run

from conftest import gaussian_model, small_config
from oracles import grid_posterior, poisson_glm_irls, rts_oracle, switching_kf_oracle
from test_learning import empty_series, one_regime_model, orthogonal_residuals, propagated_moments, stats_from_moments

FULL = os.environ.get("SMDS_FULL_SCALE") == "1"
WORKERS = int(os.environ.get("SMDS_WORKERS", "1"))
N_SYSTEMS = 30 if FULL else 10
N_REQUIRED = 27 if FULL else 9
T_STEPS = 10_000 if FULL else 5_000
EM_ITERS = 300 if FULL else 40
STUDY_SEEDS = list(range(1, N_SYSTEMS + 1))


@pytest.fixture
def report(capsys):
    """``report(n, ok, detail)`` prints the criterion line, then asserts ``ok``."""

    def _report(n, ok, detail=""):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, f"criterion {n}: {detail}"

    return _report


def _gauss_moment(powers):
    out = 1.0
    for k in powers:
        if k % 2:
            return 0.0
        out *= np.prod(np.arange(k - 1, 0, -2)) if k else 1.0
    return out


def _regime(d, alpha, beta, C, R):
    return RegimeParams(A=np.eye(d), Q=np.eye(d), alpha=alpha, beta=beta, C=C, R=R)


def test_criterion_01_cubature_exactness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for d in (1, 2, 3, 5):
        cub = cubature_points(d)
        for powers in itertools.product(range(6), repeat=d):
            if sum(powers) <= 5:
                approx = np.sum(cub.weights * np.prod(cub.points ** np.array(powers), axis=1))
                worst = max(worst, abs(approx - _gauss_moment(powers)))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-8 and elapsed < 1.0, f"max monomial error {worst:.2e}, {elapsed:.2f} s")


def test_criterion_02_reduction_identities(report):
    t0 = time.perf_counter()
    rng = make_rng(202)
    d = 3
    errs = {}

    # (a) no spike channels, tau = 1
    C, R = rng.standard_normal((2, d)), np.diag([0.5, 0.7])
    prior = GaussianBelief(rng.standard_normal(d), np.eye(d) * 0.8)
    y = rng.standard_normal(2)
    a = msnf_update(prior, np.zeros(0), y, _regime(d, np.zeros(0), np.zeros((0, d)), C, R), tau=1.0)
    b = kf_update(prior, y, C, R)
    errs["a"] = max(np.abs(a.mean - b.mean).max(), np.abs(a.cov - b.cov).max())

    # (b) missing field frame
    alpha, beta = np.log([0.1, 0.3]), rng.standard_normal((2, d)) * 0.5
    prior = GaussianBelief(rng.standard_normal(d) * 0.2, np.eye(d) * 0.3)
    a = msnf_update(prior, [1, 0], None, _regime(d, alpha, beta, rng.standard_normal((2, d)), np.eye(2)))
    b = pcf_update(prior, [1, 0], pcf_moments(prior, alpha, beta))
    errs["b"] = max(np.abs(a.mean - b.mean).max(), np.abs(a.cov - b.cov).max())

    # (c) one regime: switching filter equals the step-by-step pipeline
    cfg = small_config()
    r = make_rng(7)
    model = random_switching_model(cfg, r)
    series = simulate_series(model, 400, r)
    m1 = replace(model, regimes=model.regimes[:1], Phi=np.ones((1, 1)), pi0=np.ones(1))
    fr = smsnf_filter(m1, series)
    belief, worst = GaussianBelief(m1.mu0, m1.Lambda0), 0.0
    for k in range(series.T):
        pred = msnf_predict(belief, m1.regimes[0].A, m1.regimes[0].Q)
        belief = msnf_update(pred, series.spikes[k], series.fields[k] if series.field_mask[k] else None, m1.regimes[0])
        worst = max(worst, np.abs(fr.x[k] - belief.mean).max(), np.abs(fr.P[k] - belief.cov).max())
    errs["c"] = worst

    # (d) Gaussian-only switching data against an independent switching Kalman filter
    gm = gaussian_model(make_rng(1234), M=3, d=3, F=4, stay=0.9)
    gs = simulate_series(gm, 300, make_rng(3))
    fr = smsnf_filter(gm, gs)
    probs, means = switching_kf_oracle([(q.A, q.Q, q.C, q.R) for q in gm.regimes], gm.Phi, gm.pi0, gm.mu0,
                                       gm.Lambda0, gs.fields, gs.field_mask)
    errs["d"] = max(np.abs(fr.prob - probs).max(), np.abs(fr.x - means).max())

    elapsed = time.perf_counter() - t0
    tol = {"a": 1e-12, "b": 1e-12, "c": 1e-12, "d": 1e-8}
    ok = all(errs[k] <= tol[k] for k in tol) and elapsed < 10.0
    detail = ", ".join(f"({k}) {errs[k]:.1e}" for k in "abcd")
    report(2, ok, f"{detail}, {elapsed:.2f} s")


def test_criterion_03_grid_oracle_posterior(report):
    t0 = time.perf_counter()
    rng = make_rng(303)
    errs = []
    for _ in range(100):
        m, v = rng.normal(0, 0.5), rng.uniform(0.02, 0.2)
        alpha, beta = np.log(rng.uniform(0.06, 0.09)), rng.uniform(-1.5, 1.5)
        c, r = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)
        x = rng.normal(m, np.sqrt(v))
        n = rng.poisson(np.exp(alpha + beta * x))
        y = c * x + rng.normal(0, np.sqrt(r))
        post = msnf_update(GaussianBelief([m], [[v]]), [n], [y], _regime(1, [alpha], [[beta]], [[c]], [[r]]))
        gm, gv = grid_posterior(m, v, n=n, alpha=alpha, beta=beta, y=y, c=c, r=r)
        errs.append(abs(post.mean[0] - gm) / np.sqrt(gv))
    elapsed = time.perf_counter() - t0
    report(3, max(errs) < 0.05 and elapsed < 30.0,
           f"max |mean error| / oracle sd = {max(errs):.4f} over 100 steps, {elapsed:.2f} s")


def test_criterion_04_smoother(report):
    t0 = time.perf_counter()
    worst, shrink = 0.0, True
    for seed in (31, 41, 51):
        model = gaussian_model(make_rng(seed), M=1, d=3, F=4)
        series = simulate_series(model, 250, make_rng(seed + 1))
        r = model.regimes[0]
        fr = smsnf_filter(model, series)
        sm = sms_run(model, fr)
        xs, Ps, _, _ = rts_oracle(r.A, r.Q, r.C, r.R, model.mu0, model.Lambda0, series.fields, series.field_mask)
        worst = max(worst, np.abs(sm.x - xs).max(), np.abs(sm.P - Ps).max())
        shrink &= bool(np.all(np.trace(sm.P[1:], axis1=1, axis2=2) <= np.trace(fr.P, axis1=1, axis2=2) + 1e-12))
    elapsed = time.perf_counter() - t0
    report(4, worst <= 1e-9 and shrink and elapsed < 10.0,
           f"max deviation from fixed-interval smoother {worst:.1e}, trace shrinks: {shrink}, {elapsed:.2f} s")


def test_criterion_05_em_monotone(report):
    t0 = time.perf_counter()
    sim = simulate_system(SimConfig(M=1, T_train=2000, T_test=10), seed=5)
    _, trace = em_fit(sim.train, EmConfig(M=1, d=10, max_iters=100, modality="gaussian-only", seed=5))
    e = np.array(trace.elbo)
    drops = np.diff(e) + 1e-8 * np.abs(e[1:])
    elapsed = time.perf_counter() - t0
    ok = len(e) == 100 and np.all(drops >= 0) and elapsed < 120.0
    report(5, ok, f"{len(e)} iterations, largest step decrease {max(0.0, -np.diff(e).min()):.2e}, "
                  f"objective {e[0]:.1f} -> {e[-1]:.1f}, {elapsed:.1f} s")


def test_criterion_06_m_step_oracle(report):
    rng = make_rng(606)
    true = gaussian_model(rng, M=1, d=3, F=4).regimes[0]
    x, P, cross = propagated_moments(true.A, true.Q, rng.standard_normal(3), np.eye(3), 200)
    dyn, _ = m_step(stats_from_moments(x, P, cross), empty_series(200), EmConfig(d=3), one_regime_model(3))
    err_A = np.abs(dyn.regimes[0].A - true.A).max()
    err_Q = np.abs(dyn.regimes[0].Q - true.Q).max()

    T = 300
    xo = rng.standard_normal((T + 1, 3))
    mask = np.arange(T) % 3 == 0
    Y = np.full((T, 4), np.nan)
    Y[mask] = xo[1:][mask] @ true.C.T + orthogonal_residuals(xo[1:][mask], true.R, rng)
    stats = stats_from_moments(xo, np.zeros((T + 1, 3, 3)), np.zeros((T, 3, 3)))
    obs, _ = m_step(stats, empty_series(T, Y, mask), EmConfig(d=3), one_regime_model(3, F=4))
    err_C = np.abs(obs.regimes[0].C - true.C).max()
    err_R = np.abs(obs.regimes[0].R - true.R).max()

    X = rng.standard_normal((2000, 3)) * 0.5
    beta = rng.standard_normal((4, 3)) * 0.4
    n = rng.poisson(np.exp(rng.uniform(-2.5, -1.0, 4) + X @ beta.T))
    w = rng.uniform(0.2, 1.0, 2000)
    a, b, _ = m_step_poisson(n, X, np.zeros((2000, 3, 3)), w, np.full(4, -2.0), np.zeros((4, 3)))
    err_glm = 0.0
    for c in range(4):
        a_ref, b_ref = poisson_glm_irls(X, n[:, c], w)
        err_glm = max(err_glm, abs(a[c] - a_ref), np.abs(b[c] - b_ref).max())

    ok = err_A <= 1e-6 and err_C <= 1e-6 and err_Q <= 1e-5 and err_R <= 1e-5 and err_glm <= 1e-6
    report(6, ok, f"A {err_A:.1e}, C {err_C:.1e}, Q {err_Q:.1e}, R {err_R:.1e}, Poisson GLM {err_glm:.1e}")


# -- simulation studies ----------------------------------------------------------------

def _study(M, methods):
    cfg = ExperimentConfig(
        sim=SimConfig(M=M, T_train=T_STEPS, T_test=T_STEPS),
        em={"d": 10, "max_iters": EM_ITERS},
        methods=methods,
        smooth=False,
    ).validate()
    return simulation_study(cfg, STUDY_SEEDS, workers=WORKERS)


def _values(rows, method, metric):
    return np.array([r[method].get(metric, np.nan) for r in rows], dtype=float)


def _direction(rows, better, worse, metric):
    a, b = _values(rows, better, metric), _values(rows, worse, metric)
    wins = int(np.sum(a > b))
    p = paired_test(a, b)
    return wins, p, f"{better}>{worse} on {metric}: {wins}/{len(a)}, p={p:.2g}"


def test_criterion_07_stationary_direction(report):
    t0 = time.perf_counter()
    rows = _study(1, ["msnf-em", "pcf-em", "kf-em"])
    checks = [_direction(rows, "msnf-em", other, "latent_cc_normalized") for other in ("pcf-em", "kf-em")]
    both = int(np.sum(
        (_values(rows, "msnf-em", "latent_cc_normalized") > _values(rows, "pcf-em", "latent_cc_normalized"))
        & (_values(rows, "msnf-em", "latent_cc_normalized") > _values(rows, "kf-em", "latent_cc_normalized"))
    ))
    elapsed = time.perf_counter() - t0
    ok = both >= N_REQUIRED and all(p < 0.01 for _, p, _ in checks)
    if not FULL:
        ok &= elapsed < 30 * 60
    report(7, ok, f"beats both on {both}/{N_SYSTEMS}; " + "; ".join(c[2] for c in checks) + f"; {elapsed / 60:.1f} min")


@pytest.fixture(scope="module")
def switching_rows():
    t0 = time.perf_counter()
    rows = _study(2, ["smsnf-em", "skf-em", "spcf-em", "msnf-em"])
    return rows, time.perf_counter() - t0


def test_criterion_08_switching_direction(report, switching_rows):
    rows, elapsed = switching_rows
    comparisons = [
        ("skf-em", "latent_cc_normalized"),
        ("spcf-em", "latent_cc_normalized"),
        ("skf-em", "field_pred_cc_normalized"),
        ("spcf-em", "spike_pp_normalized"),
        ("skf-em", "regime_accuracy"),
        ("spcf-em", "regime_accuracy"),
    ]
    checks = [_direction(rows, "smsnf-em", other, metric) for other, metric in comparisons]
    acc = _values(rows, "smsnf-em", "regime_accuracy")
    se = np.sqrt(0.25 / np.array([r["T_test"] for r in rows]))
    margin_ok = int(np.sum(acc - 0.5 > 10 * se))
    ok = all(w >= N_REQUIRED and p < 0.01 for w, p, _ in checks) and margin_ok == len(rows)
    detail = "; ".join(c[2] for c in checks)
    report(8, ok, f"{detail}; regime accuracy above chance by >10 SE on {margin_ok}/{len(rows)} "
                  f"(median {np.median(acc):.3f}); {elapsed / 60:.1f} min")


def test_criterion_09_switching_beats_stationary(report, switching_rows):
    rows, _ = switching_rows
    wins, p, detail = _direction(rows, "smsnf-em", "msnf-em", "latent_cc_normalized")
    report(9, wins >= N_REQUIRED, f"{detail} (need {N_REQUIRED}/{N_SYSTEMS})")


# -- metrics and the real-data path ------------------------------------------------------

def test_criterion_10_metric_examples(report):
    acc = regime_accuracy([1, 1, 2], [2, 2, 1])
    rng = make_rng(10)
    labels = (rng.random((5000, 3)) < 0.2).astype(int)
    _, pp_chance, _ = predictive_power(rng.random((5000, 3)), labels)
    _, pp_perfect, _ = predictive_power(labels.astype(float), labels)
    rejected = int(np.sum(bh_correct([0.01, 0.02, 0.04, 0.9], q=0.05)))
    parts = {
        "permutation accuracy == 1.0": acc == 1.0,
        "chance PP ~ 0": abs(pp_chance) < 0.05,
        "perfect PP == 1": pp_perfect == pytest.approx(1.0, abs=1e-12),
        "BH rejects exactly three": rejected == 3,
    }
    detail = ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in parts.items())
    report(10, all(parts.values()), f"{detail} (accuracy {acc}, PP {pp_chance:.3f}/{pp_perfect:.3f}, "
                                    f"BH rejections {rejected})")


def test_criterion_11_real_data_path(report, tmp_path):
    cfg = SimConfig(M=1, T_train=1500, T_test=10, behavior_dim=2)
    system = simulate_system(cfg, seed=11)
    s = system.train
    # a conforming bundle as preprocessed recordings would give: no latents, no regimes
    real = MultiscaleSeries(spikes=s.spikes, fields=s.fields, field_mask=s.field_mask, behavior=s.behavior)
    write_bundle(tmp_path / "session", real)
    em = {"d": 4, "max_iters": 5}

    xcfg = ExperimentConfig.from_dict({"method": "msnf-em", "folds": 5, "em": em, "seed": 3,
                                       "paths": {"bundle": str(tmp_path / "session")}})
    summary = run(xcfg, "xval", str(tmp_path / "xval"))
    folds_ok = summary["folds"] == 5 and all(
        (tmp_path / "xval" / "folds" / f"fold_{k}" / "msnf-em" / "report.txt").exists() for k in range(1, 6)
    )
    cc = summary["aggregate"].get("msnf-em:behavior_cc")
    no_truth = not any(k.startswith("msnf-em:latent") or k.startswith("msnf-em:regime") for k in summary["aggregate"])

    fcfg = ExperimentConfig.from_dict({
        "method": "msnf-em", "folds": 5, "em": em, "seed": 3,
        "fusion": {"base_modality": "fields", "base_channels": 5, "added_channels": [0, 5], "repeats": 2},
        "paths": {"bundle": str(tmp_path / "session")},
    })
    run(fcfg, "fusion-sweep", str(tmp_path / "fusion"))
    curve = (tmp_path / "fusion" / "fusion.csv").read_text().splitlines()[1:]
    subsets = (tmp_path / "fusion" / "subsets.csv").read_text().splitlines()[1:]
    gaps = []
    for line in curve:
        base_count, added, repeat, value = line.split(",")
        if added != "0":
            continue
        base = next(row.split(",")[2] for row in subsets if row.split(",")[:2] == [repeat, "0"])
        chans = [int(c) - 1 for c in base.split()]
        single = read_bundle(tmp_path / "session").select_channels(neurons=[], features=chans)
        write_bundle(tmp_path / f"base_{repeat}", single)
        scfg = ExperimentConfig.from_dict({"method": "kf-em", "folds": 5, "em": em, "seed": 3,
                                           "paths": {"bundle": str(tmp_path / f"base_{repeat}")}})
        ref = run(scfg, "xval", str(tmp_path / f"single_{repeat}"))["aggregate"]["kf-em:behavior_cc"]
        gaps.append(abs(float(value) - ref))
    ok = folds_ok and cc is not None and np.isfinite(cc) and no_truth and len(gaps) == 2 and max(gaps) <= 1e-9
    report(11, ok, f"5-fold xval behavior CC {cc:.3f}, truth-free metrics only: {no_truth}; "
                   f"fusion zero-added vs single-scale kf-em max gap {max(gaps):.1e}")
