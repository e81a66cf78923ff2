"""Decoding metrics and paired statistics.

Latent states are compared after a least-squares linear alignment, regimes
after the best label permutation, fields through one-step-ahead predictions
and spikes through the predictive power ``2 AUC - 1`` of one-step-ahead
spiking probabilities.  Normalized variants divide by the same metric
computed with the true model on the same data.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy import stats

from .errors import ConfigError
from .filtering import _sqrt_cov, cubature_points, smsnf_filter
from .smoothing import sms_run

log = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_PERMUTATION_REGIMES = 8


def _flag(flags, msg):
    log.warning(msg)
    if flags is not None:
        flags.append(msg)


def _lstsq(X, Y, flags=None, what="design"):
    """Least-squares ``B`` minimizing ``|X B - Y|``; ridge fallback when rank deficient."""
    G = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        _flag(flags, f"{what} matrix is rank deficient; ridge {RIDGE:g} applied")
        G = G + RIDGE * np.eye(G.shape[0])
    return np.linalg.solve(G, X.T @ Y)


def similarity_align(x_hat, x_true, flags=None):
    """Linear map ``W`` minimizing ``|x_hat W - x_true|_F``.

    Returns ``(W, x_hat @ W)``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_hat.shape[0] != x_true.shape[0]:
        raise ValueError(f"length mismatch: {x_hat.shape[0]} vs {x_true.shape[0]}")
    if x_hat.shape[0] <= x_hat.shape[1]:
        raise ValueError("alignment needs more steps than latent dimensions")
    W = _lstsq(x_hat, x_true, flags, "latent estimate")
    return W, x_hat @ W


def per_dim_cc(a, b, flags=None, what="dimension"):
    """Pearson CC of matching columns; zero-variance columns give 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    sa = np.sqrt(np.sum(da * da, axis=0))
    sb = np.sqrt(np.sum(db * db, axis=0))
    out = np.zeros(a.shape[1])
    ok = (sa > 0) & (sb > 0)
    for i in np.flatnonzero(~ok):
        _flag(flags, f"{what} {i + 1} has zero variance; CC set to 0")
    out[ok] = np.sum(da * db, axis=0)[ok] / (sa[ok] * sb[ok])
    return np.clip(out, -1.0, 1.0)


def latent_cc(x_hat, x_true, flags=None):
    """Mean over dimensions of the Pearson CC."""
    return float(np.mean(per_dim_cc(x_hat, x_true, flags, "latent dimension")))


def regime_accuracy(s_true, s_hat, M=None, allow_large=False):
    """Best agreement over all relabelings of ``s_hat`` (labels are 1-based)."""
    s_true = np.asarray(s_true, dtype=int).reshape(-1)
    s_hat = np.asarray(s_hat, dtype=int).reshape(-1)
    if s_true.size != s_hat.size:
        raise ValueError(f"length mismatch: {s_true.size} vs {s_hat.size}")
    if s_true.size == 0:
        raise ValueError("empty regime sequences")
    M = int(max(s_true.max(), s_hat.max())) if M is None else int(M)
    if M > MAX_PERMUTATION_REGIMES and not allow_large:
        raise ConfigError(f"{M}! permutations is too many; pass allow_large=True to search anyway")
    # confusion[a, b] = count(s_true = a+1, s_hat = b+1)
    confusion = np.zeros((M, M))
    np.add.at(confusion, (s_true - 1, s_hat - 1), 1.0)
    best = 0.0
    rows = np.arange(M)
    for perm in itertools.permutations(range(M)):
        best = max(best, float(confusion[rows, list(perm)].sum()))
    return best / s_true.size


def field_prediction(model, series, fr):
    """One-step-ahead field prediction ``sum_j C_j x_pred_j P(s_t=j | h_{1:t-1})`` at mask steps."""
    mask = series.field_mask
    C = model.stacked()["C"]
    y_reg = np.einsum("mfd,tmd->tmf", C, fr.x_pred[mask])
    return np.einsum("tm,tmf->tf", fr.prob_pred[mask], y_reg)


def field_prediction_cc(model, series, fr, flags=None):
    """Returns ``(mean CC, per-feature CC)`` of the one-step-ahead field prediction."""
    if not series.field_mask.any():
        raise ValueError("no available field frames to evaluate")
    y_hat = field_prediction(model, series, fr)
    cc = per_dim_cc(y_hat, series.fields[series.field_mask], flags, "field feature")
    return float(cc.mean()), cc


def spike_probability(model, fr):
    """``P(n_t >= 1 | h_{1:t-1})`` per step and neuron, shape (T, C).

    Per regime, ``E[1 - exp(-lambda)]`` under the predicted belief is taken
    with the cubature rule, then mixed with the predicted regime probabilities.
    """
    T, M, d = fr.x_pred.shape
    P = model.stacked()
    cub = cubature_points(d)
    out = np.zeros((T, model.n_neurons))
    for j in range(M):
        S = _sqrt_cov(fr.P_pred[:, j])
        pts = fr.x_pred[:, j, None, :] + cub.points @ np.swapaxes(S, -1, -2)  # (T, n_pts, d)
        eta = P["alpha"][j] + pts @ P["beta"][j].T
        p_any = -np.expm1(-np.exp(np.minimum(eta, 700.0)))
        out += fr.prob_pred[:, j, None] * np.einsum("p,tpc->tc", cub.weights, p_any)
    return out


def auc(scores, labels):
    """Area under the ROC curve by the rank-sum statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def predictive_power(scores, labels, flags=None):
    """``(auc, pp, per-neuron auc)`` for score and label matrices (T, C)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per = np.array([auc(scores[:, c], labels[:, c] >= 1) for c in range(scores.shape[1])])
    for c in np.flatnonzero(np.isnan(per)):
        _flag(flags, f"neuron {c + 1} has constant spike labels; excluded from AUC")
    if np.all(np.isnan(per)):
        return np.nan, np.nan, per
    mean_auc = float(np.nanmean(per))
    return mean_auc, 2.0 * mean_auc - 1.0, per


def spike_pp(model, series, fr, flags=None):
    """One-step-ahead spike predictive power ``(auc, pp, per-neuron auc)``."""
    return predictive_power(spike_probability(model, fr), series.spikes, flags)


def behavior_decode_cc(train_latents, train_behavior, test_latents, test_behavior, flags=None):
    """Linear read-out (with intercept) fit on training pairs; returns ``(mean CC, per-dim CC)``."""
    Xtr = np.column_stack([np.asarray(train_latents, dtype=float), np.ones(len(train_latents))])
    Xte = np.column_stack([np.asarray(test_latents, dtype=float), np.ones(len(test_latents))])
    Btr = np.asarray(train_behavior, dtype=float).reshape(len(Xtr), -1)
    Bte = np.asarray(test_behavior, dtype=float).reshape(len(Xte), -1)
    if Xtr.shape[0] != Btr.shape[0] or Xte.shape[0] != Bte.shape[0]:
        raise ValueError("latent and behavior lengths differ")
    coef = _lstsq(Xtr, Btr, flags, "behavior regression")
    cc = per_dim_cc(Xte @ coef, Bte, flags, "behavior dimension")
    return float(cc.mean()), cc


def paired_test(values_a, values_b):
    """Two-sided Wilcoxon signed-rank p value; identical samples give 1."""
    a = np.asarray(values_a, dtype=float)
    b = np.asarray(values_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    if not np.any(diff != 0):
        return 1.0
    return float(stats.wilcoxon(a, b, alternative="two-sided").pvalue)


def bh_correct(p_values, q=0.05):
    """Benjamini-Hochberg step-up rejections at false discovery rate ``q``."""
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    p = np.asarray(p_values, dtype=float).reshape(-1)
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    reject = np.zeros(m, dtype=bool)
    if below.any():
        k = np.flatnonzero(below).max()
        reject[order[: k + 1]] = True
    return reject


def sign_test(wins, n):
    """One-sided binomial sign-test p value for ``wins`` successes out of ``n``."""
    return float(stats.binomtest(int(wins), int(n), 0.5, alternative="greater").pvalue)


# -- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    """Scalar metrics (``None`` when not applicable) plus per-dimension breakdowns."""

    latent_cc: float = None
    latent_cc_normalized: float = None
    latent_cc_smoothed: float = None
    latent_cc_smoothed_normalized: float = None
    regime_accuracy: float = None
    regime_accuracy_smoothed: float = None
    field_pred_cc: float = None
    field_pred_cc_normalized: float = None
    spike_auc: float = None
    spike_pp: float = None
    spike_pp_normalized: float = None
    behavior_cc: float = None
    loglik: float = None
    per_dim: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def scalars(self):
        return {
            f.name: getattr(self, f.name)
            for f in dc_fields(self)
            if f.name not in ("per_dim", "flags") and getattr(self, f.name) is not None
        }

    def to_text(self):
        lines = [f"{k}={v!r}" for k, v in self.scalars().items()]
        lines += [f"flag={msg}" for msg in self.flags]
        return "\n".join(lines) + "\n"

    def write(self, path_txt, path_csv=None):
        with open(path_txt, "w") as fh:
            fh.write(self.to_text())
        if path_csv is not None:
            with open(path_csv, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric", "index", "value"])
                for name, values in self.per_dim.items():
                    for i, v in enumerate(np.asarray(values).reshape(-1), start=1):
                        w.writerow([name, i, "" if not np.isfinite(v) else repr(float(v))])


def _ratio(a, b):
    if a is None or b is None or not np.isfinite(b) or b == 0:
        return None
    return float(a / b)


def _latent_scores(x_est, latents, flags):
    _, aligned = similarity_align(x_est, latents, flags)
    cc = per_dim_cc(aligned, latents, flags, "latent dimension")
    return float(cc.mean()), cc


def decode(model, series, smooth=True):
    """Filter (and optionally smooth) ``series`` under ``model``."""
    fr = smsnf_filter(model, series)
    sm = sms_run(model, fr) if smooth else None
    return fr, sm


def evaluate_model(model, series, true_model=None, train=None, smooth=True, true_series=None):
    """Every metric applicable to ``series``.

    Latent and regime metrics need ground truth on ``series``; normalized
    variants need ``true_model``, which decodes ``true_series`` (default
    ``series``).  Pass the full multiscale data as ``true_series`` when
    ``model`` sees only some channels, so every method shares one reference.
    Behavior CC needs ``train`` (with behavior) to fit the linear read-out.
    """
    report = EvalReport()
    flags = report.flags
    fr, sm = decode(model, series, smooth)
    report.loglik = float(fr.loglik.sum())
    ref_series = series if true_series is None else true_series
    ref = decode(true_model, ref_series, smooth) if true_model is not None else None

    if series.latents is not None:
        truth = series.latents[1:]
        report.latent_cc, report.per_dim["latent_cc"] = _latent_scores(fr.x, truth, flags)
        if sm is not None:
            report.latent_cc_smoothed, report.per_dim["latent_cc_smoothed"] = _latent_scores(sm.x[1:], truth, flags)
        if ref is not None:
            report.latent_cc_normalized = _ratio(report.latent_cc, _latent_scores(ref[0].x, truth, None)[0])
            if sm is not None:
                report.latent_cc_smoothed_normalized = _ratio(
                    report.latent_cc_smoothed, _latent_scores(ref[1].x[1:], truth, None)[0]
                )
    if series.regimes is not None:
        M = max(model.M, int(series.regimes.max()))
        report.regime_accuracy = regime_accuracy(series.regimes, fr.regime_estimate(), M)
        if sm is not None:
            report.regime_accuracy_smoothed = regime_accuracy(series.regimes, sm.regime_estimate(), M)
    if model.n_features and series.field_mask.any():
        if ref is not None and not true_model.n_features:
            ref = None
        report.field_pred_cc, report.per_dim["field_pred_cc"] = field_prediction_cc(model, series, fr, flags)
        if ref is not None:
            report.field_pred_cc_normalized = _ratio(
                report.field_pred_cc, field_prediction_cc(true_model, ref_series, ref[0])[0]
            )
    if model.n_neurons:
        report.spike_auc, report.spike_pp, report.per_dim["spike_auc"] = spike_pp(model, series, fr, flags)
        if ref is not None:
            report.spike_pp_normalized = _ratio(report.spike_pp, spike_pp(true_model, ref_series, ref[0])[1])
    if series.behavior is not None and train is not None and train.behavior is not None:
        fr_train = smsnf_filter(model, train)
        report.behavior_cc, report.per_dim["behavior_cc"] = behavior_decode_cc(
            fr_train.x, train.behavior, fr.x, series.behavior, flags
        )
    return report
