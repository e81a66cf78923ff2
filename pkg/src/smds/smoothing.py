"""Backward (non-causal) pass of the switching multiscale smoother.

For each regime pair ``(i, j)`` (``i`` at ``t-1``, ``j`` at ``t``) the gain is
``J = P_filt[t-1, i] A_j' inv(P_pred[t, j])``; pairwise regime posteriors use
the approximation ``P(s_{t-1}=i | s_t=j, h_{1:T}) ~ P(s_{t-1}=i | s_t=j, h_{1:t-1})``,
which is exactly the filter's collapse weight ``mix[t, j, i]``.

The initial state ``x_0`` is smoothed with the same recursion, treating the
prior ``(mu0, Lambda0)`` as the single "filtered" belief at ``t = 0``.  The
row ``x_reg[0, j]`` is therefore conditioned on ``s_1 = j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SmootherError
from .filtering import write_belief_csv
from .model import COV_JITTER, repair_covariance


@dataclass
class SmoothedStats:
    """Smoother output.

    Arrays of length ``T + 1`` are indexed by ``t = 0..T``; arrays of length
    ``T`` by ``t - 1`` for ``t = 1..T``.

    Attributes
    ----------
    x, P : (T+1, d), (T+1, d, d)
        Regime-merged smoothed moments.
    x_reg, P_reg : (T+1, M, d), (T+1, M, d, d)
        Per-regime smoothed moments (row 0 conditioned on ``s_1``).
    W : (T, M)
        ``P(s_t = j | h_{1:T})``.
    Wpair : (T-1, M, M)
        ``Wpair[t-2, j, i] = P(s_t = j, s_{t-1} = i | h_{1:T})`` for ``t = 2..T``.
    J : (T, M, d, d)
        Gain into ``x_{t-1}`` given ``s_t = j``, averaged over the predecessor
        regime with the collapse weights.
    cross : (T, M, d, d)
        ``<x_t x_{t-1}'>^(j)``.
    """

    x: np.ndarray
    P: np.ndarray
    x_reg: np.ndarray
    P_reg: np.ndarray
    W: np.ndarray
    Wpair: np.ndarray
    J: np.ndarray
    cross: np.ndarray

    @property
    def T(self):
        return self.W.shape[0]

    @property
    def M(self):
        return self.W.shape[1]

    def regime_estimate(self):
        return np.argmax(self.W, axis=1) + 1

    def to_csv(self, path):
        write_belief_csv(path, self.W, self.x[1:], self.P[1:])


def _gains(P_prev, A, P_pred, t):
    """``J[i, j] = P_prev[i] A[j]' inv(P_pred[j])`` as an (M, M, d, d) array."""
    try:
        G = np.swapaxes(np.linalg.solve(P_pred, A), -1, -2)
    except np.linalg.LinAlgError:
        raise SmootherError(f"step {t}: predicted covariance singular") from None
    return P_prev[:, None] @ G[None, :]


def _mixture(x, P, w):
    """Moment-match mixtures along axis 1 with weights ``w`` (rows sum to 1)."""
    xm = np.einsum("ij,ijd->id", w, x)
    diff = x - xm[:, None, :]
    Pm = np.einsum("ij,ijab->iab", w, P) + np.einsum("ij,ija,ijb->iab", w, diff, diff)
    return xm, Pm


def _conditional(pair, W_prev):
    """``P(s_t = j | s_{t-1} = i)`` from pair weights ``pair[j, i]``; rows indexed by i."""
    cond = pair.T.copy()
    safe = W_prev > 0
    cond[safe] /= W_prev[safe, None]
    cond[~safe] = 1.0 / pair.shape[0]
    return cond


def sms_run(model, fr, engine="compiled"):
    """Run the smoother on a :class:`~smds.filtering.FilterResult`.

    ``engine="numpy"`` runs the batched reference implementation.
    """
    T, M, d = fr.T, fr.M, fr.x.shape[1]
    A = np.stack([r.A for r in model.regimes])
    x_reg = np.empty((T + 1, M, d))
    P_reg = np.empty((T + 1, M, d, d))
    x = np.empty((T + 1, d))
    P = np.empty((T + 1, d, d))
    W = np.empty((T, M))
    Wpair = np.empty((max(T - 1, 0), M, M))
    Jbar = np.empty((T, M, d, d))
    if engine == "compiled":
        err = np.zeros(4, dtype=np.int64)
        c = np.ascontiguousarray
        _kernels.smoother_loop(
            c(A), c(fr.mu0), c(fr.Lambda0), c(fr.x_pred), c(fr.P_pred), c(fr.x_filt), c(fr.P_filt),
            c(fr.prob), c(fr.mix), c(fr.x), c(fr.P), COV_JITTER, x_reg, P_reg, x, P, W, Wpair, Jbar, err,
        )
        if err[0]:
            raise SmootherError(f"step {err[1]}: predicted covariance singular")
        return _finish(x, P, x_reg, P_reg, W, Wpair, Jbar)
    if engine != "numpy":
        raise ValueError(f"unknown engine {engine!r}")

    x_reg[T], P_reg[T] = fr.x_filt[T - 1], fr.P_filt[T - 1]
    x[T], P[T] = fr.x[T - 1], fr.P[T - 1]
    W[T - 1] = fr.prob[T - 1]

    for t in range(T, 0, -1):
        k = t - 1
        if t > 1:
            xf, Pf = fr.x_filt[k - 1], fr.P_filt[k - 1]
            mix = fr.mix[k]
        else:
            xf, Pf = fr.mu0[None], fr.Lambda0[None]
            mix = np.ones((M, 1))
        J = _gains(Pf, A, fr.P_pred[k], t)
        innov = x_reg[t] - fr.x_pred[k]
        xij = xf[:, None, :] + np.einsum("ijab,jb->ija", J, innov)
        Pij = Pf[:, None] + J @ (P_reg[t] - fr.P_pred[k])[None] @ np.swapaxes(J, -1, -2)
        Jbar[k] = np.einsum("ji,ijab->jab", mix, J)

        if t > 1:
            pair = mix * W[k][:, None]
            pair /= pair.sum()
            Wpair[k - 1] = pair
            W_prev = pair.sum(axis=0)
            W[k - 1] = W_prev
            cond = _conditional(pair, W_prev)
            xs, Ps = _mixture(xij, Pij, cond)
            x_reg[t - 1] = xs
            P_reg[t - 1] = repair_covariance(0.5 * (Ps + np.swapaxes(Ps, -1, -2)), COV_JITTER)
            w = W_prev
        else:
            # x_0 given s_1 = j: one predecessor (the prior) for every j
            x_reg[0] = xij[0]
            P_reg[0] = repair_covariance(0.5 * (Pij[0] + np.swapaxes(Pij[0], -1, -2)), COV_JITTER)
            w = W[0]
        xm = w @ x_reg[t - 1]
        diff = x_reg[t - 1] - xm
        Pm = np.einsum("j,jab->ab", w, P_reg[t - 1]) + np.einsum("j,ja,jb->ab", w, diff, diff)
        x[t - 1] = xm
        P[t - 1] = repair_covariance(0.5 * (Pm + Pm.T), COV_JITTER)

    return _finish(x, P, x_reg, P_reg, W, Wpair, Jbar)


def _finish(x, P, x_reg, P_reg, W, Wpair, Jbar):
    # <x_t x_{t-1}'>^(j) = x^(j)_t x^(j)_{t-1}' + P_t Jbar^(j)'
    cross = np.einsum("tja,tjb->tjab", x_reg[1:], x_reg[:-1]) + P[1:, None] @ np.swapaxes(Jbar, -1, -2)
    return SmoothedStats(x=x, P=P, x_reg=x_reg, P_reg=P_reg, W=W, Wpair=Wpair, J=Jbar, cross=cross)
