"""Parameter containers for switching multiscale dynamical systems.

A model has ``M`` regimes.  Each regime owns linear-Gaussian latent
dynamics ``x_t = A x_{t-1} + w_t`` (``w_t ~ N(0, Q)``), Poisson spiking
``n_t^c ~ Poisson(exp(alpha_c + beta_c' x_t))`` and Gaussian field features
``y_t = C x_t + r_t`` (``r_t ~ N(0, R)``).

The regime chain is **column-stochastic**: ``Phi[j, i] = P(s_t = j | s_{t-1} = i)``,
so every column of ``Phi`` sums to one and the one-step regime prediction is
``Phi @ p``.  Regime labels exposed to users (series, CSV files) are 1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ModelFormatError

SCHEMA_VERSION = 1
COV_JITTER = 1e-9
SYM_TOL = 1e-10
PSD_TOL = 1e-10
STOCH_TOL = 1e-12


def repair_covariance(mat, jitter=COV_JITTER):
    """Symmetrize ``mat`` and clamp its eigenvalues at ``jitter``.

    Works on a single ``(d, d)`` matrix or a stack ``(..., d, d)``.  Input that
    is already symmetric with all eigenvalues >= ``jitter`` comes back as
    ``(mat + mat.T) / 2`` without reconstruction, so the repair is idempotent.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim < 2 or mat.shape[-1] != mat.shape[-2]:
        raise ValueError(f"repair_covariance needs square matrices, got shape {mat.shape}")
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    if sym.shape[-1] == 0:
        return sym
    try:
        # all eigenvalues >= jitter iff sym - jitter*I is positive definite
        np.linalg.cholesky(sym - jitter * np.eye(sym.shape[-1]))
        return sym
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(sym)
    if np.all(evals >= jitter):
        return sym
    evals = np.maximum(evals, jitter)
    out = (evecs * evals[..., None, :]) @ np.swapaxes(evecs, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a Gaussian density over the latent state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "cov", cov.reshape(self.mean.size, self.mean.size))

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class RegimeParams:
    """Dynamics and observation parameters of one regime.

    Shapes: ``A, Q`` (d, d); ``alpha`` (C,); ``beta`` (C, d); ``C`` (F, d);
    ``R`` (F, F).  ``C`` and ``F`` may be zero for single-modality models.
    """

    A: np.ndarray
    Q: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    C: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        beta = np.asarray(self.beta, dtype=float).reshape(alpha.size, d)
        C = np.asarray(self.C, dtype=float)
        C = C.reshape(-1, d) if C.size else C.reshape(0, d)
        R = np.asarray(self.R, dtype=float).reshape(C.shape[0], C.shape[0])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float).reshape(d, d))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def n_neurons(self):
        return self.alpha.size

    @property
    def n_features(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class SwitchingModel:
    """Full parameter set of a switching multiscale dynamical system."""

    regimes: tuple
    Phi: np.ndarray
    pi0: np.ndarray
    mu0: np.ndarray
    Lambda0: np.ndarray
    tau: float = 1.0
    dt_ms: float = 10.0
    field_period_steps: int = 5

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "Phi", np.atleast_2d(np.asarray(self.Phi, dtype=float)))
        object.__setattr__(self, "pi0", np.asarray(self.pi0, dtype=float).reshape(-1))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float).reshape(-1))
        d = self.mu0.size
        object.__setattr__(self, "Lambda0", np.asarray(self.Lambda0, dtype=float).reshape(d, d))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "dt_ms", float(self.dt_ms))
        object.__setattr__(self, "field_period_steps", int(self.field_period_steps))

    @property
    def M(self):
        return len(self.regimes)

    @property
    def d(self):
        return self.mu0.size

    @property
    def n_neurons(self):
        return self.regimes[0].n_neurons if self.regimes else 0

    @property
    def n_features(self):
        return self.regimes[0].n_features if self.regimes else 0

    def stacked(self):
        """Per-regime parameters stacked along a leading regime axis."""
        return {
            name: np.stack([getattr(r, name) for r in self.regimes])
            for name in ("A", "Q", "alpha", "beta", "C", "R")
        }

    def with_tau(self, tau):
        return replace(self, tau=tau)

    def select_channels(self, neurons=None, features=None):
        """Model restricted to the given neuron / field-feature indices.

        ``None`` keeps every channel; an empty sequence drops the modality.
        """
        regimes = []
        for r in self.regimes:
            nidx = np.arange(r.n_neurons) if neurons is None else np.asarray(neurons, dtype=int)
            fidx = np.arange(r.n_features) if features is None else np.asarray(features, dtype=int)
            regimes.append(
                RegimeParams(
                    A=r.A,
                    Q=r.Q,
                    alpha=r.alpha[nidx],
                    beta=r.beta[nidx].reshape(nidx.size, r.d),
                    C=r.C[fidx].reshape(fidx.size, r.d),
                    R=r.R[np.ix_(fidx, fidx)],
                )
            )
        return replace(self, regimes=tuple(regimes))


@dataclass(frozen=True)
class MultiscaleSeries:
    """Time-aligned spike counts and field features.

    ``spikes`` is (T, C) integer; ``fields`` is (T, F) with arbitrary (usually
    NaN) content where ``field_mask`` is False.  ``regimes`` holds 1-based
    labels; ``latents`` (T+1, d) is simulator ground truth including ``x_0``.
    """

    spikes: np.ndarray
    fields: np.ndarray
    field_mask: np.ndarray
    behavior: Optional[np.ndarray] = None
    regimes: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None
    dt_ms: float = 10.0
    field_period_steps: int = 5

    def __post_init__(self):
        spikes = np.asarray(self.spikes)
        if spikes.ndim == 1:
            spikes = spikes.reshape(-1, 1)
        T = spikes.shape[0]
        fields = np.asarray(self.fields, dtype=float)
        if fields.ndim == 1:
            fields = fields.reshape(T, -1) if fields.size else fields.reshape(T, 0)
        mask = np.asarray(self.field_mask, dtype=bool).reshape(-1)
        if fields.shape[0] != T or mask.size != T:
            raise ValueError(
                f"spikes ({T} rows), fields ({fields.shape[0]} rows) and mask ({mask.size}) disagree"
            )
        if spikes.size and (np.any(spikes < 0) or not np.all(np.isfinite(spikes))):
            raise ValueError("spike counts must be finite and nonnegative")
        if fields.shape[1] and not np.all(np.isfinite(fields[mask])):
            raise ValueError("non-finite field values at available frames")
        object.__setattr__(self, "spikes", spikes.astype(np.int64))
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "field_mask", mask)
        if self.behavior is not None:
            b = np.asarray(self.behavior, dtype=float)
            b = b if b.ndim == 2 else b.reshape(T, -1)
            if b.shape[0] != T:
                raise ValueError(f"behavior has {b.shape[0]} rows, expected {T}")
            object.__setattr__(self, "behavior", b)
        if self.regimes is not None:
            object.__setattr__(self, "regimes", np.asarray(self.regimes, dtype=np.int64).reshape(T))
        if self.latents is not None:
            object.__setattr__(self, "latents", np.asarray(self.latents, dtype=float))

    @property
    def T(self):
        return self.spikes.shape[0]

    @property
    def n_neurons(self):
        return self.spikes.shape[1]

    @property
    def n_features(self):
        return self.fields.shape[1]

    def select_channels(self, neurons=None, features=None):
        spikes = self.spikes if neurons is None else self.spikes[:, np.asarray(neurons, dtype=int)]
        fields = self.fields if features is None else self.fields[:, np.asarray(features, dtype=int)]
        return replace(self, spikes=spikes, fields=fields)

    def slice(self, start, stop):
        """Steps ``start..stop-1`` (0-based).  Latents keep the preceding ``x``."""
        latents = None if self.latents is None else self.latents[start : stop + 1]
        return replace(
            self,
            spikes=self.spikes[start:stop],
            fields=self.fields[start:stop],
            field_mask=self.field_mask[start:stop],
            behavior=None if self.behavior is None else self.behavior[start:stop],
            regimes=None if self.regimes is None else self.regimes[start:stop],
            latents=latents,
        )


def concat_series(parts):
    """Concatenate series end to end (latents dropped; they no longer chain)."""
    parts = list(parts)
    first = parts[0]
    has_b = all(p.behavior is not None for p in parts)
    has_s = all(p.regimes is not None for p in parts)
    return MultiscaleSeries(
        spikes=np.concatenate([p.spikes for p in parts]),
        fields=np.concatenate([p.fields for p in parts]),
        field_mask=np.concatenate([p.field_mask for p in parts]),
        behavior=np.concatenate([p.behavior for p in parts]) if has_b else None,
        regimes=np.concatenate([p.regimes for p in parts]) if has_s else None,
        dt_ms=first.dt_ms,
        field_period_steps=first.field_period_steps,
    )


@dataclass(frozen=True)
class Violation:
    field: str
    index: object
    deviation: float
    message: str

    def __str__(self):
        return f"{self.field}[{self.index}]: {self.message} (deviation {self.deviation:.3g})"


def _check_cov(name, index, mat, out):
    asym = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
    if asym > SYM_TOL:
        out.append(Violation(name, index, asym, "not symmetric"))
    if mat.size:
        min_eig = float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())
        if min_eig < -PSD_TOL:
            out.append(Violation(name, index, -min_eig, f"not PSD (min eigenvalue {min_eig:.3g})"))


def validate_model(model):
    """Return the list of invariant violations of ``model`` (empty if valid)."""
    out = []
    if model.M < 1:
        return [Violation("regimes", None, 1.0, "model needs at least one regime")]
    d = model.d
    ref = model.regimes[0]
    for j, r in enumerate(model.regimes):
        for name, shape in (
            ("A", (d, d)),
            ("Q", (d, d)),
            ("alpha", (ref.n_neurons,)),
            ("beta", (ref.n_neurons, d)),
            ("C", (ref.n_features, d)),
            ("R", (ref.n_features, ref.n_features)),
        ):
            arr = getattr(r, name)
            if arr.shape != shape:
                out.append(Violation(f"regimes.{name}", j, float("nan"), f"shape {arr.shape} != {shape}"))
            elif not np.all(np.isfinite(arr)):
                out.append(Violation(f"regimes.{name}", j, float("nan"), "non-finite entries"))
        if r.Q.shape == (d, d):
            _check_cov("regimes.Q", j, r.Q, out)
        if r.R.shape == (ref.n_features, ref.n_features):
            _check_cov("regimes.R", j, r.R, out)
    M = model.M
    if model.Phi.shape != (M, M):
        out.append(Violation("Phi", None, float("nan"), f"shape {model.Phi.shape} != {(M, M)}"))
    else:
        for i in range(M):
            dev = abs(float(model.Phi[:, i].sum()) - 1.0)
            if dev > STOCH_TOL:
                out.append(Violation("Phi", i, dev, "column does not sum to 1"))
        bad = np.argwhere((model.Phi < 0) | (model.Phi > 1))
        for j, i in bad:
            out.append(Violation("Phi", (int(j), int(i)), float(model.Phi[j, i]), "entry outside [0, 1]"))
    if model.pi0.shape != (M,):
        out.append(Violation("pi0", None, float("nan"), f"shape {model.pi0.shape} != {(M,)}"))
    else:
        dev = abs(float(model.pi0.sum()) - 1.0)
        if dev > STOCH_TOL:
            out.append(Violation("pi0", None, dev, "does not sum to 1"))
        for j in np.flatnonzero((model.pi0 < 0) | (model.pi0 > 1)):
            out.append(Violation("pi0", int(j), float(model.pi0[j]), "entry outside [0, 1]"))
    if model.Lambda0.shape != (d, d):
        out.append(Violation("Lambda0", None, float("nan"), "shape mismatch"))
    else:
        _check_cov("Lambda0", None, model.Lambda0, out)
    if not model.tau > 0:
        out.append(Violation("tau", None, float(model.tau), "must be positive"))
    if not model.dt_ms > 0:
        out.append(Violation("dt_ms", None, float(model.dt_ms), "must be positive"))
    if model.field_period_steps < 1:
        out.append(Violation("field_period_steps", None, float(model.field_period_steps), "must be >= 1"))
    return out


# -- serialization -----------------------------------------------------------

def _tolist(arr):
    return np.asarray(arr, dtype=float).tolist()


def model_to_dict(model):
    return {
        "version": SCHEMA_VERSION,
        "M": model.M,
        "d": model.d,
        "C": model.n_neurons,
        "F": model.n_features,
        "dt_ms": model.dt_ms,
        "field_period_steps": model.field_period_steps,
        "tau": model.tau,
        "pi0": _tolist(model.pi0),
        "Phi": _tolist(model.Phi),
        "mu0": _tolist(model.mu0),
        "Lambda0": _tolist(model.Lambda0),
        "regimes": [
            {name: _tolist(getattr(r, name)) for name in ("A", "Q", "alpha", "beta", "C", "R")}
            for r in model.regimes
        ],
    }


def serialize_model(model):
    """JSON text of ``model``; floats use shortest round-trip repr (bit exact)."""
    return json.dumps(model_to_dict(model), indent=1)


def _array(doc, key, shape, where="model"):
    if key not in doc:
        raise ModelFormatError(f"{where}: missing field '{key}'")
    try:
        arr = np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: field '{key}' is not numeric: {exc}") from None
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"{where}: field '{key}' has {arr.size} values, expected shape {shape}")
    if arr.size and arr.shape != tuple(shape):
        raise ModelFormatError(f"{where}: field '{key}' has shape {arr.shape}, expected {tuple(shape)}")
    return arr.reshape(shape)


def model_from_dict(doc, validate=True):
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported model schema version {version!r}")
    try:
        M, d, C, F = (int(doc[k]) for k in ("M", "d", "C", "F"))
    except KeyError as exc:
        raise ModelFormatError(f"model: missing dimension field {exc}") from None
    regs = doc.get("regimes")
    if not isinstance(regs, list) or len(regs) != M:
        raise ModelFormatError(f"model: expected {M} regime entries")
    regimes = []
    for j, r in enumerate(regs):
        where = f"regimes[{j}]"
        regimes.append(
            RegimeParams(
                A=_array(r, "A", (d, d), where),
                Q=_array(r, "Q", (d, d), where),
                alpha=_array(r, "alpha", (C,), where),
                beta=_array(r, "beta", (C, d), where),
                C=_array(r, "C", (F, d), where),
                R=_array(r, "R", (F, F), where),
            )
        )
    for key in ("tau", "dt_ms", "field_period_steps"):
        if key not in doc:
            raise ModelFormatError(f"model: missing field '{key}'")
    model = SwitchingModel(
        regimes=regimes,
        Phi=_array(doc, "Phi", (M, M)),
        pi0=_array(doc, "pi0", (M,)),
        mu0=_array(doc, "mu0", (d,)),
        Lambda0=_array(doc, "Lambda0", (d, d)),
        tau=doc["tau"],
        dt_ms=doc["dt_ms"],
        field_period_steps=doc["field_period_steps"],
    )
    if validate:
        problems = validate_model(model)
        if problems:
            raise ModelFormatError("invalid model: " + "; ".join(map(str, problems)))
    return model


def deserialize_model(text, validate=True):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from None
    return model_from_dict(doc, validate=validate)


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(serialize_model(model))


def load_model(path):
    with open(path) as fh:
        return deserialize_model(fh.read())


def models_equal(a, b):
    """Exact (bitwise) parameter equality."""
    return model_to_dict(a) == model_to_dict(b)
