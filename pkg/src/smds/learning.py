"""Unsupervised expectation-maximization for switching multiscale models.

One iteration runs the switching filter and smoother under the current
parameters (E-step), evaluates the expected complete-data log-likelihood, and
re-estimates every parameter in closed form except the Poisson tuning, which
is fit by damped Newton ascent (M-step).

Modality and regime count select the method: ``gaussian-only`` drops spikes
(sKF-EM, or KF-EM with ``M = 1``), ``poisson-only`` drops fields (sPCF-EM /
PCF-EM) and ``multiscale`` keeps both (sMSNF-EM / MSNF-EM).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, SmdsError
from .filtering import smsnf_filter
from .model import COV_JITTER, RegimeParams, SwitchingModel, repair_covariance
from .simulate import make_rng, transition_matrix
from .smoothing import sms_run

log = logging.getLogger(__name__)

MODALITIES = ("multiscale", "gaussian-only", "poisson-only")
RIDGE = 1e-8
DEGENERATE_WEIGHT = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class EmConfig:
    M: int = 1
    d: int = 10
    max_iters: int = 300
    modality: str = "multiscale"
    tau: float = 1.0
    share_observation_params: bool = False
    seed: int = 0
    init_A_scale: float = 0.9
    init_stay_prob: float = 0.995
    # relative change of the objective over 5 iterations; None disables early stop
    convergence_tol: float = None
    newton_max_iters: int = 50
    newton_tol: float = 1e-8

    def validate(self):
        if self.M < 1 or self.d < 1:
            raise ConfigError(f"need M >= 1 and d >= 1, got M={self.M}, d={self.d}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        return self


@dataclass
class EmTrace:
    """Per-iteration record of an EM run.

    ``elbo`` holds the expected complete-data log-likelihood evaluated under
    the parameters that produced the E-step posterior; ``loglik`` is the
    filter's one-step-ahead log evidence for the same parameters.
    """

    elbo: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    delta_params: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    aborted: str = None

    def __len__(self):
        return len(self.elbo)

    def log_lines(self):
        lines = ["iter,elbo_proxy,delta_params,seconds"]
        for k, (e, dp, s) in enumerate(zip(self.elbo, self.delta_params, self.seconds), start=1):
            lines.append(f"{k},{e!r},{dp!r},{s:.6f}")
        return lines

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.log_lines()) + "\n")


class FitAborted(SmdsError):
    """EM stopped early on a numerical failure; carries the partial trace."""

    def __init__(self, message, trace, model):
        super().__init__(message)
        self.trace = trace
        self.model = model


# -- initialization ----------------------------------------------------------------

def init_params(cfg, series, rng):
    """Initial model for ``series`` (all channels).

    Random draws happen in a fixed order on the full channel set, so restricting
    the result to one modality afterwards gives the same starting point for
    every method compared on a dataset.  Draw order: for each regime, ``beta``
    (C x d) then ``C`` (F x d); then the Q perturbation when observation
    parameters are shared.
    """
    if series.T == 0:
        raise ConfigError("cannot initialize from an empty series")
    M, d = cfg.M, cfg.d
    n_c, n_f = series.n_neurons, series.n_features
    mean_counts = series.spikes.mean(axis=0) if n_c else np.zeros(0)
    alpha = np.log(np.maximum(mean_counts, 1.0 / series.T))
    if n_f:
        ys = series.fields[series.field_mask]
        var = ys.var(axis=0) if ys.shape[0] > 1 else np.ones(n_f)
        R = np.diag(np.maximum(var, COV_JITTER))
    else:
        R = np.zeros((0, 0))
    draws = [(rng.normal(0.0, 0.1, (n_c, d)), rng.normal(0.0, 0.1, (n_f, d))) for _ in range(M)]
    Qs = [np.eye(d) for _ in range(M)]
    if cfg.share_observation_params:
        shared = draws[0]
        draws = [shared] * M
        if M > 1:
            # identical regimes would never separate; perturb the noise scale
            Qs = [np.diag(np.exp(rng.normal(0.0, 0.1, d))) for _ in range(M)]
    regimes = [
        RegimeParams(A=cfg.init_A_scale * np.eye(d), Q=Qs[j], alpha=alpha.copy(), beta=b, C=c, R=R.copy())
        for j, (b, c) in enumerate(draws)
    ]
    return SwitchingModel(
        regimes=regimes,
        Phi=transition_matrix(M, cfg.init_stay_prob),
        pi0=np.full(M, 1.0 / M),
        mu0=np.zeros(d),
        Lambda0=np.eye(d),
        tau=cfg.tau,
        dt_ms=series.dt_ms,
        field_period_steps=series.field_period_steps,
    )


def restrict_to_modality(model, series, modality):
    if modality == "gaussian-only":
        return model.select_channels(neurons=[]), series.select_channels(neurons=[])
    if modality == "poisson-only":
        return model.select_channels(features=[]), series.select_channels(features=[])
    return model, series


# -- E-step ---------------------------------------------------------------------------

@dataclass
class Moments:
    """Per-regime second moments assembled from the smoother output."""

    W: np.ndarray  # (T, M)
    x1: np.ndarray  # (T, M, d)   E[x_t | s_t = j]
    x0: np.ndarray  # (T, M, d)   smoothed x_{t-1} paired with regime j
    S11: np.ndarray  # (T, M, d, d) <x_t x_t'>
    S00: np.ndarray  # (T, M, d, d) <x_{t-1} x_{t-1}'>
    S10: np.ndarray  # (T, M, d, d) <x_t x_{t-1}'>
    P1_reg: np.ndarray  # (T, M, d, d) per-regime smoothed covariance at t


def moments(stats):
    x1 = stats.x_reg[1:]
    x0 = stats.x_reg[:-1]
    S11 = np.einsum("tja,tjb->tjab", x1, x1) + stats.P[1:, None]
    S00 = np.einsum("tja,tjb->tjab", x0, x0) + stats.P[:-1, None]
    return Moments(W=stats.W, x1=x1, x0=x0, S11=S11, S00=S00, S10=stats.cross, P1_reg=stats.P_reg[1:])


def _logdet(mat):
    sign, val = np.linalg.slogdet(mat)
    return np.where(sign > 0, val, -np.inf)


def expected_loglik(model, series, stats, mom=None):
    """Expected complete-data log-likelihood, with all normalizing constants.

    Returns a dict of the individual terms and their ``total``.  The field
    term is scaled by ``model.tau`` and runs over available field frames only.
    """
    mom = moments(stats) if mom is None else mom
    P = model.stacked()
    W, d = mom.W, model.d
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pi0)
        log_phi = np.log(model.Phi)
    terms = {}
    terms["regime"] = float(
        np.sum(np.where(W[0] > 0, W[0] * log_pi, 0.0))
        + np.sum(np.where(stats.Wpair > 0, stats.Wpair * log_phi[None], 0.0))
    )
    x0, P0 = stats.x[0], stats.P[0]
    diff = x0 - model.mu0
    L0inv = np.linalg.inv(model.Lambda0)
    terms["initial"] = float(
        -0.5 * np.trace(L0inv @ (P0 + np.outer(diff, diff))) - 0.5 * _logdet(model.Lambda0) - 0.5 * d * LOG_2PI
    )
    # dynamics: sum_t sum_j W tr(Q^-1 (S11 - A S10' - S10 A' + A S00 A'))
    A, Q = P["A"], P["Q"]
    S11 = np.einsum("tj,tjab->jab", W, mom.S11)
    S10 = np.einsum("tj,tjab->jab", W, mom.S10)
    S00 = np.einsum("tj,tjab->jab", W, mom.S00)
    At = np.swapaxes(A, -1, -2)
    inner = S11 - A @ np.swapaxes(S10, -1, -2) - S10 @ At + A @ S00 @ At
    wsum = W.sum(axis=0)
    Qinv = np.linalg.inv(Q)
    terms["dynamics"] = float(
        np.sum(-0.5 * np.trace(Qinv @ inner, axis1=1, axis2=2) - 0.5 * wsum * (_logdet(Q) + d * LOG_2PI))
    )
    terms["spikes"] = 0.0
    if model.n_neurons:
        n = series.spikes.astype(float)
        eta = P["alpha"][None] + np.einsum("jcd,tjd->tjc", P["beta"], mom.x1)
        quad = np.einsum("jcd,tjde,jce->tjc", P["beta"], mom.P1_reg, P["beta"])
        val = n[:, None, :] * eta - np.exp(eta + 0.5 * quad) - gammaln(n + 1.0)[:, None, :]
        terms["spikes"] = float(np.sum(W[:, :, None] * val))
    terms["fields"] = 0.0
    if model.n_features:
        mask = series.field_mask
        y = series.fields[mask]
        Wm = W[mask]
        Cm, R = P["C"], P["R"]
        Syy = np.einsum("tj,ta,tb->jab", Wm, y, y)
        Syx = np.einsum("tj,ta,tjb->jab", Wm, y, mom.x1[mask])
        Sxx = np.einsum("tj,tjab->jab", Wm, mom.S11[mask])
        Ct = np.swapaxes(Cm, -1, -2)
        inner = Syy - Cm @ np.swapaxes(Syx, -1, -2) - Syx @ Ct + Cm @ Sxx @ Ct
        wsum_m = Wm.sum(axis=0)
        Rinv = np.linalg.inv(R)
        F = model.n_features
        val = -0.5 * np.trace(Rinv @ inner, axis1=1, axis2=2) - 0.5 * wsum_m * (_logdet(R) + F * LOG_2PI)
        terms["fields"] = float(model.tau * np.sum(val))
    terms["total"] = sum(terms.values())
    return terms


def e_step(model, series):
    """Filter + smoother under ``model``.

    Returns ``(stats, value, filter_result)`` where ``value`` is the expected
    complete-data log-likelihood under the same parameters.
    """
    fr = smsnf_filter(model, series)
    stats = sms_run(model, fr)
    value = expected_loglik(model, series, stats)["total"]
    return stats, value, fr


# -- M-step -------------------------------------------------------------------------------

def _solve_right(num, den):
    """``num @ inv(den + ridge I)`` for stacked matrices."""
    d = den.shape[-1]
    reg = den + RIDGE * np.eye(d)
    return np.swapaxes(np.linalg.solve(reg, np.swapaxes(num, -1, -2)), -1, -2)


def _gaussian_obs(y, x, Sxx_rows, w):
    """Weighted least-squares ``C`` and residual covariance ``R``.

    ``y`` (N, F), ``x`` (N, d), ``Sxx_rows`` (N, d, d), ``w`` (N,).
    """
    Syy = np.einsum("n,na,nb->ab", w, y, y)
    Syx = np.einsum("n,na,nb->ab", w, y, x)
    Sxx = np.einsum("n,nab->ab", w, Sxx_rows)
    C = _solve_right(Syx, Sxx)
    R = (Syy - C @ Syx.T - Syx @ C.T + C @ Sxx @ C.T) / w.sum()
    return C, repair_covariance(R, COV_JITTER)


def _quad_terms(beta, Sig):
    """``Sig_n beta_c`` as (N, d, C) and ``beta_c' Sig_n beta_c`` as (N, C)."""
    N, d = Sig.shape[:2]
    Sb = (Sig.reshape(N * d, d) @ beta.T).reshape(N, d, -1)
    return Sb, np.sum(Sb * beta.T[None], axis=1)


def _poisson_objective(theta, n, mu, Sig, w):
    """Weighted expected Poisson log-likelihood per neuron (no log n! term).

    ``theta`` (C, d+1); ``n`` (N, C); ``mu`` (N, d); ``Sig`` (N, d, d); ``w`` (N,).
    """
    alpha, beta = theta[:, 0], theta[:, 1:]
    eta = alpha[None] + mu @ beta.T
    _, quad = _quad_terms(beta, Sig)
    with np.errstate(over="ignore"):
        val = n * eta - np.exp(eta + 0.5 * quad)
    return w @ val


def _poisson_grad_hess(theta, n, mu, Sig, w):
    alpha, beta = theta[:, 0], theta[:, 1:]
    N, d = mu.shape
    eta = alpha[None] + mu @ beta.T
    Sb, quad = _quad_terms(beta, Sig)
    e = np.exp(eta + 0.5 * quad) * w[:, None]
    v = np.ascontiguousarray(np.transpose(mu[:, :, None] + Sb, (2, 0, 1)))  # (C, N, d)
    nw = n * w[:, None]
    C = beta.shape[0]
    ev = e.T[:, :, None] * v
    grad = np.empty((C, d + 1))
    grad[:, 0] = np.sum(nw - e, axis=0)
    grad[:, 1:] = nw.T @ mu - ev.sum(axis=1)
    H = np.empty((C, d + 1, d + 1))
    H[:, 0, 0] = -e.sum(axis=0)
    H[:, 0, 1:] = -ev.sum(axis=1)
    H[:, 1:, 0] = H[:, 0, 1:]
    H[:, 1:, 1:] = -(np.swapaxes(ev, 1, 2) @ v + (e.T @ Sig.reshape(N, d * d)).reshape(C, d, d))
    return grad, H


def m_step_poisson(n, mu, Sig, w, alpha0, beta0, max_iters=50, tol=1e-8):
    """Maximize the weighted expected Poisson log-likelihood for every neuron.

    Damped Newton with per-neuron backtracking; the objective is concave in
    ``(alpha, beta)``.  Returns ``(alpha, beta, info)`` where ``info`` holds the
    final gradient norms, iteration count and the objective history.
    """
    theta = np.column_stack([alpha0, beta0]).astype(float)
    with np.errstate(over="ignore", invalid="ignore"):
        f = _poisson_objective(theta, n, mu, Sig, w)
    # start from the rate-matched baseline wherever it beats the warm start
    rate = np.sum(w[:, None] * n, axis=0) / w.sum()
    base = np.zeros_like(theta)
    base[:, 0] = np.log(np.maximum(rate, 1e-12))
    f_base = _poisson_objective(base, n, mu, Sig, w)
    worse = ~(f >= f_base)
    theta[worse] = base[worse]
    f = np.where(worse, f_base, f)
    history = [f.copy()]
    steps = 0
    while True:
        grad, H = _poisson_grad_hess(theta, n, mu, Sig, w)
        gnorm = np.linalg.norm(grad, axis=1)
        active = gnorm >= tol
        if not active.any() or steps >= max_iters:
            break
        steps += 1
        idx = np.flatnonzero(active)
        D = theta.shape[1]
        try:
            step = np.linalg.solve(-H[idx] + 1e-12 * np.eye(D), grad[idx][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = grad[idx] / np.maximum(np.abs(np.diagonal(H[idx], axis1=1, axis2=2)), 1e-12)
        scale = np.ones(idx.size)
        pending = np.ones(idx.size, bool)
        new = theta.copy()
        for _ in range(40):
            sub = np.flatnonzero(pending)
            cand = theta[idx[sub]] + scale[sub, None] * step[sub]
            f_trial = _poisson_objective(cand, n[:, idx[sub]], mu, Sig, w)
            # tolerate rounding noise of the summed objective near the optimum
            floor = f[idx[sub]] - 64 * np.finfo(float).eps * (np.abs(f[idx[sub]]) + 1.0)
            ok = np.isfinite(f_trial) & (f_trial >= floor)
            new[idx[sub[ok]]] = cand[ok]
            pending[sub[ok]] = False
            if not pending.any():
                break
            scale[pending] *= 0.5
        theta = new
        f = _poisson_objective(theta, n, mu, Sig, w)
        history.append(f.copy())
    info = {"grad_norm": gnorm, "iters": steps, "objective": np.array(history)}
    return theta[:, 0], theta[:, 1:], info


def m_step(stats, series, cfg, prev):
    """Closed-form parameter updates (Poisson tuning by :func:`m_step_poisson`).

    ``prev`` is the model that produced ``stats``; it supplies ``tau``, the
    bin metadata, and the fallback for regimes that received no posterior
    weight.  Returns ``(model, warnings)``.
    """
    mom = moments(stats)
    W = mom.W
    T, M = W.shape
    d = prev.d
    wsum = W.sum(axis=0)
    notes = []

    S11 = np.einsum("tj,tjab->jab", W, mom.S11)
    S10 = np.einsum("tj,tjab->jab", W, mom.S10)
    S00 = np.einsum("tj,tjab->jab", W, mom.S00)
    A = _solve_right(S10, S00)
    At = np.swapaxes(A, -1, -2)
    Q = S11 - A @ np.swapaxes(S10, -1, -2) - S10 @ At + A @ S00 @ At
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = Q / wsum[:, None, None]

    n_c, n_f = prev.n_neurons, prev.n_features
    mask = series.field_mask
    alphas = [r.alpha for r in prev.regimes]
    betas = [r.beta for r in prev.regimes]
    Cs = [r.C for r in prev.regimes]
    Rs = [r.R for r in prev.regimes]
    n = series.spikes.astype(float)
    share = cfg.share_observation_params and M > 1

    if share:
        if n_f and mask.any():
            Wm = W[mask]
            rows = Wm.size
            y = np.repeat(series.fields[mask], M, axis=0)
            C, R = _gaussian_obs(
                y, mom.x1[mask].reshape(rows, d), mom.S11[mask].reshape(rows, d, d), Wm.reshape(rows)
            )
            Cs, Rs = [C] * M, [R] * M
        if n_c:
            a, b, _ = m_step_poisson(
                np.repeat(n, M, axis=0), mom.x1.reshape(T * M, d), mom.P1_reg.reshape(T * M, d, d),
                W.reshape(T * M), prev.regimes[0].alpha, prev.regimes[0].beta,
                cfg.newton_max_iters, cfg.newton_tol,
            )
            alphas, betas = [a] * M, [b] * M

    regimes = []
    for j in range(M):
        old = prev.regimes[j]
        if wsum[j] < DEGENERATE_WEIGHT:
            notes.append(f"regime {j + 1} has total posterior weight {wsum[j]:.3g}; parameters kept")
            regimes.append(old)
            continue
        if not share:
            if n_f and mask.any() and W[mask, j].sum() >= DEGENERATE_WEIGHT:
                Cs[j], Rs[j] = _gaussian_obs(series.fields[mask], mom.x1[mask, j], mom.S11[mask, j], W[mask, j])
            if n_c:
                alphas[j], betas[j], _ = m_step_poisson(
                    n, mom.x1[:, j], mom.P1_reg[:, j], W[:, j], old.alpha, old.beta,
                    cfg.newton_max_iters, cfg.newton_tol,
                )
        regimes.append(
            RegimeParams(A=A[j], Q=repair_covariance(Q[j], COV_JITTER), alpha=alphas[j], beta=betas[j],
                         C=Cs[j], R=Rs[j])
        )

    Wpair_sum = stats.Wpair.sum(axis=0)  # [j, i]
    col = Wpair_sum.sum(axis=0)
    Phi = prev.Phi.copy()
    ok = col > 0
    Phi[:, ok] = Wpair_sum[:, ok] / col[ok]
    Phi = Phi / Phi.sum(axis=0, keepdims=True)
    pi0 = W[0] / W[0].sum()
    model = SwitchingModel(
        regimes=regimes,
        Phi=Phi,
        pi0=pi0,
        mu0=stats.x[0].copy(),
        Lambda0=repair_covariance(stats.P[0], COV_JITTER),
        tau=prev.tau,
        dt_ms=prev.dt_ms,
        field_period_steps=prev.field_period_steps,
    )
    for msg in notes:
        log.warning(msg)
    return model, notes


def _param_vector(model):
    parts = [model.Phi.ravel(), model.pi0, model.mu0, model.Lambda0.ravel()]
    for r in model.regimes:
        parts += [r.A.ravel(), r.Q.ravel(), r.alpha, r.beta.ravel(), r.C.ravel(), r.R.ravel()]
    return np.concatenate(parts)


def em_fit(series, cfg, init=None, callback=None):
    """Fit a model to ``series`` by EM.

    ``init`` overrides :func:`init_params` (it must already match the modality).
    ``callback(k, model, trace)`` runs after every iteration.  Returns
    ``(model, trace)``; numerical failures raise :class:`FitAborted` carrying
    the partial trace and the last good model.
    """
    cfg.validate()
    if init is None:
        full = init_params(cfg, series, make_rng(cfg.seed))
        model, data = restrict_to_modality(full, series, cfg.modality)
    else:
        model = init
        _, data = restrict_to_modality(init, series, cfg.modality)
    model = model.with_tau(cfg.tau) if model.tau != cfg.tau else model
    trace = EmTrace()
    for k in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        try:
            stats, value, fr = e_step(model, data)
            new, notes = m_step(stats, data, cfg, model)
        except (SmdsError, np.linalg.LinAlgError, FloatingPointError) as exc:
            trace.aborted = f"iteration {k}: {exc}"
            raise FitAborted(trace.aborted, trace, model) from exc
        trace.elbo.append(value)
        trace.loglik.append(float(fr.loglik.sum()))
        trace.delta_params.append(float(np.linalg.norm(_param_vector(new) - _param_vector(model))))
        trace.seconds.append(time.perf_counter() - t0)
        trace.warnings.extend(f"iteration {k}: {m}" for m in notes)
        model = new
        if callback is not None:
            callback(k, model, trace)
        if cfg.convergence_tol is not None and k > 5:
            ref = trace.elbo[-6]
            if abs(trace.elbo[-1] - ref) <= cfg.convergence_tol * abs(ref):
                break
    return model, trace
