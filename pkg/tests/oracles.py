"""Reference implementations used only by the tests.

These are written in plain covariance form with explicit loops so they share
no code path with the package's batched information-form kernels.
"""

import numpy as np
from scipy.special import gammaln
from scipy.stats import multivariate_normal, poisson


def kalman_oracle(A, Q, C, R, mu0, L0, Y, mask=None):
    """Covariance-form Kalman filter; returns predicted and filtered moments."""
    T = Y.shape[0]
    mask = np.ones(T, bool) if mask is None else mask
    d = mu0.size
    xp, Pp = np.zeros((T, d)), np.zeros((T, d, d))
    xf, Pf = np.zeros((T, d)), np.zeros((T, d, d))
    x, P = mu0, L0
    for t in range(T):
        x, P = A @ x, A @ P @ A.T + Q
        xp[t], Pp[t] = x, P
        if mask[t]:
            S = C @ P @ C.T + R
            K = P @ C.T @ np.linalg.inv(S)
            x = x + K @ (Y[t] - C @ x)
            P = (np.eye(d) - K @ C) @ P
        xf[t], Pf[t] = x, P
    return xp, Pp, xf, Pf


def rts_oracle(A, Q, C, R, mu0, L0, Y, mask=None):
    """Kalman filter plus Rauch-Tung-Striebel backward pass, including ``x_0``."""
    xp, Pp, xf, Pf = kalman_oracle(A, Q, C, R, mu0, L0, Y, mask)
    T, d = xf.shape
    xs, Ps = np.zeros((T + 1, d)), np.zeros((T + 1, d, d))
    xs[T], Ps[T] = xf[-1], Pf[-1]
    for t in range(T, 0, -1):
        x_prev = mu0 if t == 1 else xf[t - 2]
        P_prev = L0 if t == 1 else Pf[t - 2]
        G = P_prev @ A.T @ np.linalg.inv(Pp[t - 1])
        xs[t - 1] = x_prev + G @ (xs[t] - xp[t - 1])
        Ps[t - 1] = P_prev + G @ (Ps[t] - Pp[t - 1]) @ G.T
    return xs, Ps, xf, Pf


def switching_kf_oracle(regimes, Phi, pi0, mu0, L0, Y, mask):
    """Switching Kalman filter with mixture collapse and innovation likelihoods.

    ``regimes`` is a list of ``(A, Q, C, R)`` tuples.  Returns filtered regime
    probabilities and merged means.
    """
    M = len(regimes)
    T = Y.shape[0]
    d = mu0.size
    xs = [mu0.copy() for _ in range(M)]
    Ps = [L0.copy() for _ in range(M)]
    p = None
    probs = np.zeros((T, M))
    means = np.zeros((T, d))
    for t in range(T):
        new_x, new_P, like = [], [], []
        if t == 0:
            prior = pi0.copy()
        else:
            prior = Phi @ p
        for j, (A, Q, C, R) in enumerate(regimes):
            if t == 0:
                x0, P0 = xs[0], Ps[0]
            else:
                w = np.array([Phi[j, i] * p[i] for i in range(M)])
                w = w / w.sum()
                x0 = sum(w[i] * xs[i] for i in range(M))
                P0 = sum(w[i] * (Ps[i] + np.outer(xs[i] - x0, xs[i] - x0)) for i in range(M))
            x, P = A @ x0, A @ P0 @ A.T + Q
            if mask[t]:
                S = C @ P @ C.T + R
                like.append(multivariate_normal(C @ x, S).logpdf(Y[t]))
                K = P @ C.T @ np.linalg.inv(S)
                x = x + K @ (Y[t] - C @ x)
                P = P - K @ S @ K.T
            else:
                like.append(0.0)
            new_x.append(x)
            new_P.append(P)
        like = np.array(like)
        post = prior * np.exp(like - like.max())
        p = post / post.sum()
        xs, Ps = new_x, new_P
        probs[t] = p
        means[t] = sum(p[j] * xs[j] for j in range(M))
    return probs, means


def grid_posterior(prior_mean, prior_var, n=None, alpha=None, beta=None, y=None, c=None, r=None,
                   tau=1.0, points=10_000):
    """Scalar-state posterior mean and variance on a dense grid over +-8 sd."""
    sd = np.sqrt(prior_var)
    grid = np.linspace(prior_mean - 8 * sd, prior_mean + 8 * sd, points)
    logp = -0.5 * (grid - prior_mean) ** 2 / prior_var
    if n is not None:
        logp += poisson.logpmf(n, np.exp(alpha + beta * grid))
    if y is not None:
        logp += tau * (-0.5 * (y - c * grid) ** 2 / r)
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = np.sum(w * grid)
    return mean, np.sum(w * (grid - mean) ** 2)


def poisson_glm_irls(X, n, weights=None, iters=100, tol=1e-12):
    """Weighted Poisson regression with log link by iteratively reweighted least squares."""
    Xd = np.column_stack([np.ones(X.shape[0]), X])
    w = np.ones(X.shape[0]) if weights is None else weights
    coef = np.zeros(Xd.shape[1])
    coef[0] = np.log(np.sum(w * n) / np.sum(w))
    for _ in range(iters):
        eta = Xd @ coef
        mu = np.exp(eta)
        z = eta + (n - mu) / mu
        W = w * mu
        new = np.linalg.solve(Xd.T @ (W[:, None] * Xd), Xd.T @ (W * z))
        if np.max(np.abs(new - coef)) < tol:
            coef = new
            break
        coef = new
    return coef[0], coef[1:]


def poisson_loglik(n, eta):
    return np.sum(n * eta - np.exp(eta) - gammaln(n + 1))
