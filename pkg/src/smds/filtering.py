"""Causal inference for switching multiscale systems.

The per-regime update fuses a Poisson cubature step for spikes with a Kalman
step for field features, both in information form::

    inv(P_post) = inv(P_pred) + Ct' inv(Rt) Ct + tau C' inv(R) C
    x_post      = x_pred + P_post (Ct' inv(Rt) (n - n_hat) + tau C' inv(R) (y - C x_pred))

where ``Ct`` / ``Rt`` are the effective observation matrix and noise of the
spikes, computed from cubature moments of the predicted belief.  Missing
field frames simply drop the field terms.

The switching filter runs, for every step: mixture collapse per successor
regime, prediction, the fused update, the regime posterior (log space) and the
probability-weighted merge.  Internals are batched over regimes; the public
single-belief functions are thin wrappers around the same kernels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from . import _kernels
from .errors import FilterError
from .model import COV_JITTER, GaussianBelief, repair_covariance

RATE_EXP_LIMIT = 30.0
PROB_FLOOR = 1e-300
LOG_2PI = np.log(2.0 * np.pi)


# -- cubature ------------------------------------------------------------------

@dataclass(frozen=True)
class CubatureSet:
    """Fifth-degree spherical-radial rule: ``2 d^2 + 1`` points and weights."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self):
        return self.weights.size


@lru_cache(maxsize=32)
def cubature_points(d):
    """Fifth-degree spherical-radial cubature rule for ``N(0, I_d)``.

    The axis weights ``(4 - d) / (2 (d + 2)^2)`` are negative for ``d > 4``;
    that is part of the rule.
    """
    d = int(d)
    if d < 1:
        raise ValueError(f"cubature rule needs d >= 1, got {d}")
    scale = np.sqrt(d + 2.0)
    eye = np.eye(d)
    points = [np.zeros(d)]
    weights = [2.0 / (d + 2)]
    w_axis = (4.0 - d) / (2.0 * (d + 2) ** 2)
    for j in range(d):
        points += [scale * eye[j], -scale * eye[j]]
        weights += [w_axis, w_axis]
    w_pair = 1.0 / (d + 2) ** 2
    for j in range(d):
        for k in range(j + 1, d):
            for v in (eye[j] + eye[k], eye[j] - eye[k]):
                v = scale * v / np.sqrt(2.0)
                points += [v, -v]
                weights += [w_pair, w_pair]
    pts = np.array(points)
    w = np.array(weights)
    pts.setflags(write=False)
    w.setflags(write=False)
    return CubatureSet(points=pts, weights=w)


def _sqrt_cov(P):
    """Lower Cholesky factors of a stack ``(m, d, d)`` with jitter escalation."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(P)
    eye = np.eye(P.shape[-1])
    for k, mat in enumerate(P):
        mat = 0.5 * (mat + mat.T)
        for jitter in (0.0, 1e-9, 1e-8, 1e-7, 1e-6):
            try:
                out[k] = np.linalg.cholesky(mat + jitter * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            evals, evecs = np.linalg.eigh(mat)
            out[k] = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return out


# -- data containers -----------------------------------------------------------

@dataclass(frozen=True)
class PcfStats:
    """Cubature moments of the spike observation under a predicted belief."""

    n_hat: np.ndarray
    L_xn: np.ndarray
    L_nn: np.ndarray
    C_tilde: np.ndarray
    R_tilde: np.ndarray


@dataclass(frozen=True)
class SwitchPosterior:
    per_regime: tuple
    per_regime_pred: tuple
    regime_prob: np.ndarray
    regime_pred_prob: np.ndarray
    merged: GaussianBelief


@dataclass
class FilterResult:
    """Forward pass output, stored as arrays indexed by step ``t - 1``.

    ``mix[k, j, i]`` is ``P(s_{t-1} = i | s_t = j, h_{1:t-1})`` for ``t = k + 1``
    (the collapse weights).  ``loglik[k]`` is the log of the (scaled) one-step
    evidence ``log sum_j P(s_t=j | h_{1:t-1}) f(h_t | h_{1:t-1}, s_t=j)``.
    """

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    prob_pred: np.ndarray
    prob: np.ndarray
    mix: np.ndarray
    x: np.ndarray
    P: np.ndarray
    loglik: np.ndarray
    mu0: np.ndarray
    Lambda0: np.ndarray

    @property
    def T(self):
        return self.x.shape[0]

    @property
    def M(self):
        return self.prob.shape[1]

    def __len__(self):
        return self.T

    def posterior(self, t):
        """:class:`SwitchPosterior` at 1-based step ``t``."""
        k = t - 1
        if not 0 <= k < self.T:
            raise IndexError(t)
        return SwitchPosterior(
            per_regime=tuple(GaussianBelief(self.x_filt[k, j], self.P_filt[k, j]) for j in range(self.M)),
            per_regime_pred=tuple(GaussianBelief(self.x_pred[k, j], self.P_pred[k, j]) for j in range(self.M)),
            regime_prob=self.prob[k],
            regime_pred_prob=self.prob_pred[k],
            merged=GaussianBelief(self.x[k], self.P[k]),
        )

    def __iter__(self):
        for t in range(1, self.T + 1):
            yield self.posterior(t)

    def regime_estimate(self):
        """1-based argmax of the filtered regime probabilities."""
        return np.argmax(self.prob, axis=1) + 1

    def to_csv(self, path):
        write_belief_csv(path, self.prob, self.x, self.P)


def write_belief_csv(path, prob, x, P):
    M, d = prob.shape[1], x.shape[1]
    header = (
        ["t"]
        + [f"regime_prob_{j + 1}" for j in range(M)]
        + [f"mean_{i + 1}" for i in range(d)]
        + [f"var_{i + 1}" for i in range(d)]
    )
    diag = np.diagonal(P, axis1=1, axis2=2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(x.shape[0]):
            w.writerow([k + 1] + [repr(float(v)) for v in np.concatenate([prob[k], x[k], diag[k]])])


# -- batched kernels -----------------------------------------------------------

def _predict(x, P, A, Q):
    x_pred = np.einsum("mij,mj->mi", A, x)
    P_pred = A @ P @ np.swapaxes(A, -1, -2) + Q
    return x_pred, 0.5 * (P_pred + np.swapaxes(P_pred, -1, -2))


def _pcf_terms(x, P, alpha, beta, cub, step=None):
    """Cubature moments for a stack of beliefs (leading axis = regime)."""
    S = _sqrt_cov(P)
    pts = x[:, None, :] + cub.points @ np.swapaxes(S, -1, -2)
    eta = alpha[:, None, :] + pts @ np.swapaxes(beta, -1, -2)
    if eta.max() > RATE_EXP_LIMIT:
        m, a, c = np.unravel_index(np.argmax(eta), eta.shape)
        raise FilterError(
            f"rate overflow for neuron {c + 1} (regime {m + 1}): log-rate {eta[m, a, c]:.3g}", step
        )
    lam = np.exp(eta)
    wl = lam * cub.weights[None, :, None]
    n_hat = wl.sum(axis=1)
    L_xn = np.swapaxes(pts, -1, -2) @ wl - x[:, :, None] * n_hat[:, None, :]
    L_nn = np.swapaxes(wl, -1, -2) @ lam - n_hat[:, :, None] * n_hat[:, None, :]
    idx = np.arange(n_hat.shape[1])
    L_nn[:, idx, idx] += n_hat
    L_nn = 0.5 * (L_nn + np.swapaxes(L_nn, -1, -2))
    Ct_T = np.linalg.solve(P, L_xn)  # inv(P) L_xn, shape (m, d, C)
    C_tilde = np.swapaxes(Ct_T, -1, -2)
    R_tilde = L_nn - np.swapaxes(L_xn, -1, -2) @ Ct_T
    R_tilde = 0.5 * (R_tilde + np.swapaxes(R_tilde, -1, -2))
    try:
        np.linalg.cholesky(R_tilde)
    except np.linalg.LinAlgError:
        R_tilde = repair_covariance(R_tilde, COV_JITTER)
    return n_hat, L_xn, L_nn, C_tilde, R_tilde


def _fused_update(x_pred, P_pred, spike_terms=None, n=None, field_terms=None, y=None, tau=1.0, step=None):
    """Information-form update for a stack of predicted beliefs.

    ``spike_terms`` is ``(n_hat, C_tilde, R_tilde)``; ``field_terms`` is
    ``(C, CtRinv, CtRinvC)`` with ``CtRinv = C' inv(R)``.  Returns posterior
    mean, covariance and information matrix.
    """
    m, d = x_pred.shape
    info = np.linalg.inv(P_pred)
    info = 0.5 * (info + np.swapaxes(info, -1, -2))
    rhs = np.zeros((m, d))
    if spike_terms is not None:
        n_hat, C_tilde, R_tilde = spike_terms
        innov = n[None, :] - n_hat
        stacked = np.concatenate([C_tilde, innov[:, :, None]], axis=2)
        try:
            RiC = np.linalg.solve(R_tilde, stacked)
        except np.linalg.LinAlgError:
            raise FilterError("effective spike noise not invertible", step) from None
        Ct_T = np.swapaxes(C_tilde, -1, -2)
        info = info + Ct_T @ RiC[:, :, :d]
        rhs += np.einsum("mdc,mc->md", Ct_T, RiC[:, :, d])
    if field_terms is not None:
        Cm, CtRinv, CtRinvC = field_terms
        resid = y[None, :] - np.einsum("mfd,md->mf", Cm, x_pred)
        info = info + tau * CtRinvC
        rhs += tau * np.einsum("mdf,mf->md", CtRinv, resid)
    info = 0.5 * (info + np.swapaxes(info, -1, -2))
    try:
        P_post = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise FilterError("posterior information matrix singular", step) from None
    P_post = repair_covariance(P_post, COV_JITTER)
    x_post = x_pred + np.einsum("mij,mj->mi", P_post, rhs)
    return x_post, P_post, info


def _field_terms(Cm, R):
    """``(C, C' inv(R), C' inv(R) C)`` stacked over regimes, plus ``log|R|``."""
    if Cm.shape[1] == 0:
        return None, None
    try:
        Rinv_C = np.linalg.solve(R, Cm)
    except np.linalg.LinAlgError:
        raise FilterError("field noise covariance R is singular") from None
    CtRinv = np.swapaxes(Rinv_C, -1, -2)
    CtRinvC = np.swapaxes(Cm, -1, -2) @ Rinv_C
    _, logdet_R = np.linalg.slogdet(R)
    Rinv = np.linalg.inv(R)
    return (Cm, CtRinv, 0.5 * (CtRinvC + np.swapaxes(CtRinvC, -1, -2))), (Rinv, logdet_R)


def _regime_loglik(x_post, P_post_info, x_pred, P_pred, params, n, y, tau, field_aux, gln_n):
    """Per-regime log f(h_t | h_{1:t-1}, s_t = j) evaluated at the posterior mean."""
    ll = np.zeros(x_post.shape[0])
    if n is not None:
        eta = params["alpha"] + np.einsum("mcd,md->mc", params["beta"], x_post)
        ll += np.sum(n[None, :] * eta - np.exp(eta), axis=1) - gln_n
    if y is not None:
        Rinv, logdet_R = field_aux
        resid = y[None, :] - np.einsum("mfd,md->mf", params["C"], x_post)
        quad = np.einsum("mf,mfg,mg->m", resid, Rinv, resid)
        ll += tau * (-0.5 * (quad + logdet_R + y.size * LOG_2PI))
    delta = x_post - x_pred
    _, logdet_info = np.linalg.slogdet(P_post_info)
    _, logdet_pred = np.linalg.slogdet(P_pred)
    mahal = np.einsum("mi,mi->m", delta, np.linalg.solve(P_pred, delta[:, :, None])[:, :, 0])
    ll += 0.5 * (-logdet_info - logdet_pred) - 0.5 * mahal
    return ll


def _normalize_log(log_prior, ll, step=None):
    lp = np.log(np.maximum(log_prior, PROB_FLOOR)) + ll
    if not np.any(np.isfinite(lp)):
        raise FilterError("all regime log-likelihoods are -inf or NaN", step)
    lp = np.where(np.isnan(lp), -np.inf, lp)
    top = lp.max()
    p = np.exp(lp - top)
    total = top + np.log(p.sum())
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(), total


def _collapse(x_prev, P_prev, p_prev, Phi, step=None):
    weights = Phi * p_prev[None, :]
    norm = weights.sum(axis=1)
    if np.any(norm <= 0):
        j = int(np.flatnonzero(norm <= 0)[0])
        raise FilterError(f"no predecessor mass for regime {j + 1}", step)
    mix = weights / norm[:, None]
    xm = mix @ x_prev
    diff = x_prev[None, :, :] - xm[:, None, :]
    Pm = np.einsum("ji,iab->jab", mix, P_prev) + np.einsum("ji,jia,jib->jab", mix, diff, diff)
    return xm, 0.5 * (Pm + np.swapaxes(Pm, -1, -2)), mix


def _merge(x, P, p):
    xm = p @ x
    diff = x - xm[None, :]
    Pm = np.einsum("j,jab->ab", p, P) + np.einsum("j,ja,jb->ab", p, diff, diff)
    return xm, 0.5 * (Pm + Pm.T)


# -- public single-belief API --------------------------------------------------

def msnf_predict(post_prev, A, Q):
    x, P = _predict(post_prev.mean[None], post_prev.cov[None], np.asarray(A)[None], np.asarray(Q)[None])
    return GaussianBelief(x[0], P[0])


def kf_update(prior, y, C, R, tau=1.0):
    """Kalman update in information form with likelihood exponent ``tau``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    terms, _ = _field_terms(C[None], R[None])
    if terms is None:
        return prior
    x, P, _ = _fused_update(prior.mean[None], prior.cov[None], field_terms=terms, y=y, tau=tau)
    return GaussianBelief(x[0], P[0])


def pcf_moments(prior, alpha, beta, cub=None):
    """Cubature moments and effective linear observation of the spikes."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.asarray(beta, dtype=float).reshape(alpha.size, prior.dim)
    cub = cub or cubature_points(prior.dim)
    n_hat, L_xn, L_nn, C_tilde, R_tilde = _pcf_terms(
        prior.mean[None], prior.cov[None], alpha[None], beta[None], cub
    )
    return PcfStats(n_hat=n_hat[0], L_xn=L_xn[0], L_nn=L_nn[0], C_tilde=C_tilde[0], R_tilde=R_tilde[0])


def pcf_update(prior, n, stats):
    n = np.atleast_1d(np.asarray(n, dtype=float))
    x, P, _ = _fused_update(
        prior.mean[None],
        prior.cov[None],
        spike_terms=(stats.n_hat[None], stats.C_tilde[None], stats.R_tilde[None]),
        n=n,
    )
    return GaussianBelief(x[0], P[0])


def msnf_update(prior, n, y, regime, tau=1.0, cub=None):
    """Fused spike + field update for one regime; ``y=None`` marks a missing frame."""
    d = prior.dim
    spike_terms = None
    if regime.n_neurons:
        st = pcf_moments(prior, regime.alpha, regime.beta, cub)
        spike_terms = (st.n_hat[None], st.C_tilde[None], st.R_tilde[None])
        n = np.atleast_1d(np.asarray(n, dtype=float))
    field_terms = None
    if y is not None and regime.n_features:
        field_terms, _ = _field_terms(regime.C[None], regime.R[None])
        y = np.atleast_1d(np.asarray(y, dtype=float))
    if spike_terms is None and field_terms is None:
        return GaussianBelief(prior.mean.copy(), prior.cov.copy())
    x, P, _ = _fused_update(
        prior.mean.reshape(1, d), prior.cov[None], spike_terms=spike_terms, n=n,
        field_terms=field_terms, y=y, tau=tau,
    )
    return GaussianBelief(x[0], P[0])


def smsnf_collapse(beliefs, probs, Phi, j):
    """Moment-matched belief about ``x_{t-1}`` given ``s_t = j`` (0-based ``j``)."""
    x = np.stack([b.mean for b in beliefs])
    P = np.stack([b.cov for b in beliefs])
    xm, Pm, _ = _collapse(x, P, np.asarray(probs, dtype=float), np.asarray(Phi, dtype=float))
    return GaussianBelief(xm[j], Pm[j])


def regime_update(prior_probs, pred_beliefs, post_beliefs, n, y, model):
    """Filtered regime distribution from per-regime predicted/updated beliefs."""
    P = model.stacked()
    x_pred = np.stack([b.mean for b in pred_beliefs])
    P_pred = np.stack([b.cov for b in pred_beliefs])
    x_post = np.stack([b.mean for b in post_beliefs])
    info = np.linalg.inv(np.stack([b.cov for b in post_beliefs]))
    field_aux = None
    if y is not None and model.n_features:
        _, field_aux = _field_terms(P["C"], P["R"])
        y = np.atleast_1d(np.asarray(y, dtype=float))
    else:
        y = None
    if model.n_neurons:
        n = np.atleast_1d(np.asarray(n, dtype=float))
        gln = float(gammaln(n + 1).sum())
    else:
        n, gln = None, 0.0
    ll = _regime_loglik(x_post, info, x_pred, P_pred, P, n, y, model.tau, field_aux, gln)
    p, _ = _normalize_log(np.asarray(prior_probs, dtype=float), ll)
    return p


# -- switching filter ------------------------------------------------------------

def smsnf_filter(model, series, engine="compiled"):
    """Run the switching multiscale filter over ``series``.

    Field rows are read only where ``series.field_mask`` is True.  At ``t = 1``
    every regime starts from ``(mu0, Lambda0)`` and the predicted regime
    distribution is ``pi0``.  ``engine="numpy"`` runs the batched reference
    implementation instead of the compiled loop.
    """
    T, M, d = series.T, model.M, model.d
    if series.n_neurons != model.n_neurons or series.n_features != model.n_features:
        raise FilterError(
            f"series has {series.n_neurons} neurons / {series.n_features} features, "
            f"model expects {model.n_neurons} / {model.n_features}"
        )
    if engine not in ("compiled", "numpy"):
        raise ValueError(f"unknown engine {engine!r}")
    P = model.stacked()
    tau = model.tau
    cub = cubature_points(d)
    has_spikes = model.n_neurons > 0
    field_terms, field_aux = _field_terms(P["C"], P["R"]) if model.n_features else (None, None)
    spikes = series.spikes.astype(float)
    gln = gammaln(spikes + 1.0).sum(axis=1) if has_spikes else np.zeros(T)

    out = dict(
        x_pred=np.empty((T, M, d)),
        P_pred=np.empty((T, M, d, d)),
        x_filt=np.empty((T, M, d)),
        P_filt=np.empty((T, M, d, d)),
        prob_pred=np.empty((T, M)),
        prob=np.empty((T, M)),
        mix=np.empty((T, M, M)),
        x=np.empty((T, d)),
        P=np.empty((T, d, d)),
        loglik=np.empty(T),
    )
    if engine == "compiled":
        _run_compiled(model, series, P, field_terms, field_aux, spikes, gln, cub, out)
        return FilterResult(mu0=model.mu0.copy(), Lambda0=model.Lambda0.copy(), **out)
    x_prev = np.repeat(model.mu0[None], M, axis=0)
    P_prev = np.repeat(model.Lambda0[None], M, axis=0)
    for k in range(T):
        step = k + 1
        if k == 0:
            xc, Pc = x_prev, P_prev
            p_pred = model.pi0.copy()
            mix = np.full((M, M), 1.0 / M)
        else:
            xc, Pc, mix = _collapse(x_prev, P_prev, p_prev, model.Phi, step)
            p_pred = model.Phi @ p_prev
        x_pred, P_pred = _predict(xc, Pc, P["A"], P["Q"])

        n = spikes[k] if has_spikes else None
        spike_terms = None
        if has_spikes:
            n_hat, _, _, C_tilde, R_tilde = _pcf_terms(x_pred, P_pred, P["alpha"], P["beta"], cub, step)
            spike_terms = (n_hat, C_tilde, R_tilde)
        y = series.fields[k] if (field_terms is not None and series.field_mask[k]) else None
        x_post, P_post, info = _fused_update(
            x_pred, P_pred, spike_terms, n, field_terms if y is not None else None, y, tau, step
        )
        ll = _regime_loglik(x_post, info, x_pred, P_pred, P, n, y, tau, field_aux, gln[k])
        p, total = _normalize_log(p_pred, ll, step)
        xm, Pm = _merge(x_post, P_post, p)

        out["x_pred"][k], out["P_pred"][k] = x_pred, P_pred
        out["x_filt"][k], out["P_filt"][k] = x_post, P_post
        out["prob_pred"][k], out["prob"][k], out["mix"][k] = p_pred, p, mix
        out["x"][k], out["P"][k], out["loglik"][k] = xm, Pm, total
        x_prev, P_prev, p_prev = x_post, P_post, p
    return FilterResult(mu0=model.mu0.copy(), Lambda0=model.Lambda0.copy(), **out)


_ERROR_TEXT = {
    _kernels.ERR_RATE: "rate overflow for neuron {neuron} (regime {regime})",
    _kernels.ERR_INFO: "posterior information matrix singular (regime {regime})",
    _kernels.ERR_LOGLIK: "all regime log-likelihoods are -inf or NaN",
    _kernels.ERR_MASS: "no predecessor mass for regime {regime}",
    _kernels.ERR_PRED: "predicted covariance not positive definite (regime {regime})",
}


def _run_compiled(model, series, P, field_terms, field_aux, spikes, gln, cub, out):
    M, d = model.M, model.d
    n_f = model.n_features
    if field_terms is None:
        Cm, CtRinv, CtRinvC = np.zeros((M, 0, d)), np.zeros((M, d, 0)), np.zeros((M, d, d))
        Rinv, logdet_R = np.zeros((M, 0, 0)), np.zeros(M)
    else:
        Cm, CtRinv, CtRinvC = field_terms
        Rinv, logdet_R = field_aux
    fields = np.nan_to_num(series.fields, nan=0.0) if n_f else np.zeros((series.T, 0))
    err = np.zeros(4, dtype=np.int64)
    c = np.ascontiguousarray
    _kernels.filter_loop(
        c(model.mu0), c(model.Lambda0), c(model.pi0), c(model.Phi), c(P["A"]), c(P["Q"]),
        c(P["alpha"]), c(P["beta"]), c(Cm), c(CtRinv), c(CtRinvC), c(Rinv), c(np.atleast_1d(logdet_R)),
        float(model.tau), c(spikes), c(gln), c(fields), c(series.field_mask),
        cub.points, cub.weights, COV_JITTER, PROB_FLOOR, RATE_EXP_LIMIT,
        out["x_pred"], out["P_pred"], out["x_filt"], out["P_filt"], out["prob_pred"], out["prob"],
        out["mix"], out["x"], out["P"], out["loglik"], err,
    )
    if err[0]:
        msg = _ERROR_TEXT[int(err[0])].format(regime=err[2], neuron=err[3])
        raise FilterError(msg, int(err[1]))
