"""Compiled forward and backward recursions.

These mirror the batched numpy kernels in :mod:`smds.filtering` and
:mod:`smds.smoothing` step for step; the numpy versions stay available as a
reference engine.  Small symmetric positive-definite systems are solved with
an in-place Cholesky factorization instead of LAPACK calls, which dominate
the cost at ``d ~ 10``.

Failures are reported through an integer status array ``err``:
``err[0]`` is the code (see ``ERR_*``), ``err[1]`` the 1-based step,
``err[2]`` the 1-based regime and ``err[3]`` the 1-based neuron.
"""

import numpy as np
from numba import njit

ERR_OK = 0
ERR_RATE = 1
ERR_INFO = 2
ERR_LOGLIK = 3
ERR_MASS = 4
ERR_PRED = 5

_JITTERS = (0.0, 1e-9, 1e-8, 1e-7, 1e-6)


@njit(cache=True)
def _chol(a, out):
    """Lower Cholesky factor of ``a`` into ``out``; False if not positive definite."""
    n = a.shape[0]
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_solve(L, b):
    """Solve ``L L' X = b`` in place (``b`` is (n, r))."""
    n, r = b.shape
    for c in range(r):
        for i in range(n):
            s = b[i, c]
            for k in range(i):
                s -= L[i, k] * b[k, c]
            b[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = b[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * b[k, c]
            b[i, c] = s / L[i, i]


@njit(cache=True)
def _logdet_chol(L):
    s = 0.0
    for i in range(L.shape[0]):
        s += np.log(L[i, i])
    return 2.0 * s


@njit(cache=True)
def _sym(a):
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = v
            a[j, i] = v


@njit(cache=True)
def _repair(a, jitter, work):
    """Symmetrize ``a`` in place and clamp eigenvalues at ``jitter``."""
    _sym(a)
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            work[i, j] = a[i, j]
        work[i, i] -= jitter
    L = np.empty_like(a)
    if _chol(work, L):
        return
    evals, evecs = np.linalg.eigh(a)
    evals = np.maximum(evals, jitter)
    out = (evecs * evals) @ evecs.T
    for i in range(n):
        for j in range(n):
            a[i, j] = 0.5 * (out[i, j] + out[j, i])


@njit(cache=True)
def _sqrt_cov(P, out):
    n = P.shape[0]
    work = np.empty_like(P)
    for jitter in _JITTERS:
        for i in range(n):
            for j in range(n):
                work[i, j] = 0.5 * (P[i, j] + P[j, i])
            work[i, i] += jitter
        if _chol(work, out):
            return
    for i in range(n):
        for j in range(n):
            work[i, j] = 0.5 * (P[i, j] + P[j, i])
    evals, evecs = np.linalg.eigh(work)
    for i in range(n):
        for j in range(n):
            out[i, j] = evecs[i, j] * np.sqrt(max(evals[j], 0.0))


@njit(cache=True)
def _inv_pd(a, L, out):
    """``out = inv(a)`` via Cholesky; False if ``a`` is not positive definite."""
    if not _chol(a, L):
        return False
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
        out[i, i] = 1.0
    _chol_solve(L, out)
    _sym(out)
    return True


@njit(cache=True)
def filter_loop(mu0, Lambda0, pi0, Phi, A, Q, alpha, beta, Cm, CtRinv, CtRinvC, Rinv, logdet_R,
                tau, spikes, gln, fields, mask, cub_pts, cub_w, jitter, prob_floor, rate_limit,
                x_pred_o, P_pred_o, x_filt_o, P_filt_o, prob_pred_o, prob_o, mix_o, x_o, P_o, loglik_o, err):
    T = spikes.shape[0]
    M, d = A.shape[0], A.shape[1]
    n_c = alpha.shape[1]
    n_f = Cm.shape[1]
    n_pts = cub_w.shape[0]
    log2pi = np.log(2.0 * np.pi)

    x_prev = np.empty((M, d))
    P_prev = np.empty((M, d, d))
    for j in range(M):
        x_prev[j] = mu0
        P_prev[j] = Lambda0
    p_prev = np.empty(M)

    xc = np.empty((M, d))
    Pc = np.empty((M, d, d))
    mix = np.empty((M, M))
    p_pred = np.empty(M)
    L = np.empty((d, d))
    S = np.empty((d, d))
    info = np.empty((d, d))
    Pp_inv = np.empty((d, d))
    work = np.empty((d, d))
    pts = np.empty((n_pts, d))
    lam = np.empty((n_pts, n_c))
    wl = np.empty((n_pts, n_c))
    n_hat = np.empty(n_c)
    L_xn = np.empty((d, n_c))
    L_nn = np.empty((n_c, n_c))
    Lc = np.empty((n_c, n_c))
    workc = np.empty((n_c, n_c))
    rhs = np.empty(d)
    resid = np.empty(n_f)
    ll = np.empty(M)
    x_post = np.empty((M, d))
    P_post = np.empty((M, d, d))

    for k in range(T):
        step = k + 1
        # collapse over predecessors
        if k == 0:
            for j in range(M):
                xc[j] = x_prev[j]
                Pc[j] = P_prev[j]
                p_pred[j] = pi0[j]
                for i in range(M):
                    mix[j, i] = 1.0 / M
        else:
            for j in range(M):
                norm = 0.0
                for i in range(M):
                    mix[j, i] = Phi[j, i] * p_prev[i]
                    norm += mix[j, i]
                if not norm > 0.0:
                    err[0] = ERR_MASS
                    err[1] = step
                    err[2] = j + 1
                    return
                for i in range(M):
                    mix[j, i] /= norm
                for a in range(d):
                    s = 0.0
                    for i in range(M):
                        s += mix[j, i] * x_prev[i, a]
                    xc[j, a] = s
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for i in range(M):
                            s += mix[j, i] * (P_prev[i, a, b] + (x_prev[i, a] - xc[j, a]) * (x_prev[i, b] - xc[j, b]))
                        Pc[j, a, b] = s
                _sym(Pc[j])
                s = 0.0
                for i in range(M):
                    s += Phi[j, i] * p_prev[i]
                p_pred[j] = s

        has_field = n_f > 0 and mask[k]
        for j in range(M):
            # predict
            xp = A[j] @ xc[j]
            Pp = A[j] @ Pc[j] @ A[j].T + Q[j]
            _sym(Pp)
            x_pred_o[k, j] = xp
            P_pred_o[k, j] = Pp
            if not _inv_pd(Pp, L, Pp_inv):
                err[0] = ERR_PRED
                err[1] = step
                err[2] = j + 1
                return
            logdet_pred = _logdet_chol(L)
            for a in range(d):
                for b in range(d):
                    info[a, b] = Pp_inv[a, b]
                rhs[a] = 0.0

            if n_c > 0:
                _sqrt_cov(Pp, S)
                pts[:, :] = cub_pts @ S.T
                for p in range(n_pts):
                    for a in range(d):
                        pts[p, a] += xp[a]
                eta = pts @ beta[j].T
                for p in range(n_pts):
                    for c in range(n_c):
                        e = eta[p, c] + alpha[j, c]
                        if e > rate_limit:
                            err[0] = ERR_RATE
                            err[1] = step
                            err[2] = j + 1
                            err[3] = c + 1
                            return
                        lam[p, c] = np.exp(e)
                        wl[p, c] = cub_w[p] * lam[p, c]
                for c in range(n_c):
                    n_hat[c] = 0.0
                for p in range(n_pts):
                    for c in range(n_c):
                        n_hat[c] += wl[p, c]
                L_xn[:, :] = pts.T @ wl
                for a in range(d):
                    for c in range(n_c):
                        L_xn[a, c] -= xp[a] * n_hat[c]
                L_nn[:, :] = wl.T @ lam
                for c in range(n_c):
                    for e2 in range(n_c):
                        L_nn[c, e2] -= n_hat[c] * n_hat[e2]
                    L_nn[c, c] += n_hat[c]
                _sym(L_nn)
                # Ct_T = inv(Pp) L_xn ; R_tilde = L_nn - L_xn' Ct_T
                Ct_T = Pp_inv @ L_xn
                Rt = L_nn - L_xn.T @ Ct_T
                _sym(Rt)
                if not _chol(Rt, Lc):
                    _repair(Rt, jitter, workc)
                    _chol(Rt, Lc)
                # stacked solve: inv(Rt) [Ct | innov]
                rhs_c = np.empty((n_c, d + 1))
                for c in range(n_c):
                    for a in range(d):
                        rhs_c[c, a] = Ct_T[a, c]
                    rhs_c[c, d] = spikes[k, c] - n_hat[c]
                _chol_solve(Lc, rhs_c)
                upd = Ct_T @ rhs_c
                for a in range(d):
                    for b in range(d):
                        info[a, b] += upd[a, b]
                    rhs[a] += upd[a, d]

            if has_field:
                for f in range(n_f):
                    s = fields[k, f]
                    for a in range(d):
                        s -= Cm[j, f, a] * xp[a]
                    resid[f] = s
                for a in range(d):
                    for b in range(d):
                        info[a, b] += tau * CtRinvC[j, a, b]
                    s = 0.0
                    for f in range(n_f):
                        s += CtRinv[j, a, f] * resid[f]
                    rhs[a] += tau * s

            _sym(info)
            if not _inv_pd(info, L, P_post[j]):
                err[0] = ERR_INFO
                err[1] = step
                err[2] = j + 1
                return
            logdet_info = _logdet_chol(L)
            _repair(P_post[j], jitter, work)
            for a in range(d):
                s = xp[a]
                for b in range(d):
                    s += P_post[j, a, b] * rhs[b]
                x_post[j, a] = s

            # regime log-likelihood at the posterior mean
            v = 0.0
            if n_c > 0:
                for c in range(n_c):
                    e = alpha[j, c]
                    for a in range(d):
                        e += beta[j, c, a] * x_post[j, a]
                    v += spikes[k, c] * e - np.exp(e)
                v -= gln[k]
            if has_field:
                q = 0.0
                for f in range(n_f):
                    s = fields[k, f]
                    for a in range(d):
                        s -= Cm[j, f, a] * x_post[j, a]
                    resid[f] = s
                for f in range(n_f):
                    s = 0.0
                    for g in range(n_f):
                        s += Rinv[j, f, g] * resid[g]
                    q += resid[f] * s
                v += tau * (-0.5 * (q + logdet_R[j] + n_f * log2pi))
            m = 0.0
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += Pp_inv[a, b] * (x_post[j, b] - xp[b])
                m += (x_post[j, a] - xp[a]) * s
            ll[j] = v + 0.5 * (-logdet_info - logdet_pred) - 0.5 * m

        # regime posterior
        top = -np.inf
        lp = np.empty(M)
        for j in range(M):
            lp[j] = np.log(max(p_pred[j], prob_floor)) + ll[j]
            if np.isnan(lp[j]):
                lp[j] = -np.inf
            if lp[j] > top:
                top = lp[j]
        if not np.isfinite(top):
            err[0] = ERR_LOGLIK
            err[1] = step
            return
        tot = 0.0
        for j in range(M):
            lp[j] = np.exp(lp[j] - top)
            tot += lp[j]
        loglik_o[k] = top + np.log(tot)
        tot = 0.0
        for j in range(M):
            lp[j] = max(lp[j], prob_floor)
            tot += lp[j]
        for j in range(M):
            lp[j] /= tot

        # merge
        for a in range(d):
            s = 0.0
            for j in range(M):
                s += lp[j] * x_post[j, a]
            x_o[k, a] = s
        for a in range(d):
            for b in range(d):
                s = 0.0
                for j in range(M):
                    s += lp[j] * (P_post[j, a, b] + (x_post[j, a] - x_o[k, a]) * (x_post[j, b] - x_o[k, b]))
                P_o[k, a, b] = s
        _sym(P_o[k])

        for j in range(M):
            x_filt_o[k, j] = x_post[j]
            P_filt_o[k, j] = P_post[j]
            prob_pred_o[k, j] = p_pred[j]
            prob_o[k, j] = lp[j]
            p_prev[j] = lp[j]
            x_prev[j] = x_post[j]
            P_prev[j] = P_post[j]
            for i in range(M):
                mix_o[k, j, i] = mix[j, i]


@njit(cache=True)
def smoother_loop(A, mu0, Lambda0, x_pred, P_pred, x_filt, P_filt, prob, mix_all, x_m, P_m, jitter,
                  x_reg, P_reg, x, P, W, Wpair, Jbar, err):
    T, M, d = x_filt.shape
    work = np.empty((d, d))
    L = np.empty((d, d))
    G = np.empty((M, d, d))  # A_j' inv(P_pred_j)
    J = np.empty((M, M, d, d))
    xij = np.empty((M, M, d))
    Pij = np.empty((M, M, d, d))
    cond = np.empty((M, M))
    pair = np.empty((M, M))
    W_prev = np.empty(M)
    x_reg[T] = x_filt[T - 1]
    P_reg[T] = P_filt[T - 1]
    x[T] = x_m[T - 1]
    P[T] = P_m[T - 1]
    W[T - 1] = prob[T - 1]
    for t in range(T, 0, -1):
        k = t - 1
        n_prev = M if t > 1 else 1
        for j in range(M):
            if not _chol(P_pred[k, j], L):
                err[0] = ERR_PRED
                err[1] = t
                err[2] = j + 1
                return
            # G_j = inv(P_pred_j) A_j, then transpose
            g = A[j].copy()
            _chol_solve(L, g)
            G[j] = g.T
        for i in range(n_prev):
            if t > 1:
                xf = x_filt[k - 1, i]
                Pf = P_filt[k - 1, i]
            else:
                xf = mu0
                Pf = Lambda0
            for j in range(M):
                J[i, j] = Pf @ G[j]
                innov = x_reg[t, j] - x_pred[k, j]
                xij[i, j] = xf + J[i, j] @ innov
                Pij[i, j] = Pf + J[i, j] @ (P_reg[t, j] - P_pred[k, j]) @ J[i, j].T
        for j in range(M):
            for a in range(d):
                for b in range(d):
                    s = 0.0
                    for i in range(n_prev):
                        m = mix_all[k, j, i] if t > 1 else 1.0
                        s += m * J[i, j, a, b]
                    Jbar[k, j, a, b] = s

        if t > 1:
            tot = 0.0
            for j in range(M):
                for i in range(M):
                    pair[j, i] = mix_all[k, j, i] * W[k, j]
                    tot += pair[j, i]
            for j in range(M):
                for i in range(M):
                    pair[j, i] /= tot
            for i in range(M):
                s = 0.0
                for j in range(M):
                    s += pair[j, i]
                W_prev[i] = s
                W[k - 1, i] = s
            Wpair[k - 1] = pair
            for i in range(M):
                for j in range(M):
                    if W_prev[i] > 0:
                        cond[i, j] = pair[j, i] / W_prev[i]
                    else:
                        cond[i, j] = 1.0 / M
            for i in range(M):
                for a in range(d):
                    s = 0.0
                    for j in range(M):
                        s += cond[i, j] * xij[i, j, a]
                    x_reg[t - 1, i, a] = s
                for a in range(d):
                    for b in range(d):
                        s = 0.0
                        for j in range(M):
                            s += cond[i, j] * (Pij[i, j, a, b]
                                               + (xij[i, j, a] - x_reg[t - 1, i, a]) * (xij[i, j, b] - x_reg[t - 1, i, b]))
                        P_reg[t - 1, i, a, b] = s
                _repair(P_reg[t - 1, i], jitter, work)
            for i in range(M):
                W_prev[i] = W[k - 1, i]
        else:
            for j in range(M):
                x_reg[0, j] = xij[0, j]
                P_reg[0, j] = Pij[0, j]
                _repair(P_reg[0, j], jitter, work)
            for j in range(M):
                W_prev[j] = W[0, j]
        for a in range(d):
            s = 0.0
            for j in range(M):
                s += W_prev[j] * x_reg[t - 1, j, a]
            x[t - 1, a] = s
        for a in range(d):
            for b in range(d):
                s = 0.0
                for j in range(M):
                    s += W_prev[j] * (P_reg[t - 1, j, a, b]
                                      + (x_reg[t - 1, j, a] - x[t - 1, a]) * (x_reg[t - 1, j, b] - x[t - 1, b]))
                P[t - 1, a, b] = s
        _repair(P[t - 1], jitter, work)
