"""Random switching multiscale systems and synthetic spike/field series.

Latent dynamics are built in a block basis: ``d/2`` rotation-scaling blocks
``r [[cos th, -sin th], [sin th, cos th]]``.  Each block (a complex-conjugate
eigenvalue pair) is tagged ``shared``, ``spike`` or ``field``; spike tuning
vectors have exact zeros on ``field`` blocks and field loadings have exact
zeros on ``spike`` blocks.

All randomness comes from a Philox counter-based generator seeded explicitly
(:func:`make_rng`).  Draw order inside each generator function is fixed and
documented so that a seed pins the output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import ConfigError, SimulationError
from .model import MultiscaleSeries, RegimeParams, SwitchingModel

RATE_EXP_LIMIT = 30.0
SHARED, SPIKE_ONLY, FIELD_ONLY = "shared", "spike", "field"


def make_rng(seed):
    """Philox (counter-based, 64-bit keyed) generator for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


@dataclass
class SimConfig:
    d: int = 10
    C: int = 30
    F: int = 30
    M: int = 1
    T_train: int = 10_000
    T_test: int = 10_000
    dt_ms: float = 10.0
    field_period_steps: int = 5
    stay_prob: float = 0.99
    eig_radius_range: tuple = (0.99, 0.995)
    eig_angle_range: tuple = (0.0, 0.063)
    shared_mode_pairs: int = 3
    spike_only_pairs: int = 1
    field_only_pairs: int = 1
    q_eig_range: tuple = (0.01, 0.04)
    base_rate_hz_range: tuple = (6.0, 9.0)
    max_rate_hz_range: tuple = (40.0, 50.0)
    field_value_range: tuple = (26.0, 30.0)
    snr_range: tuple = (0.3, 0.35)
    # behavior b_t = H x_t + noise; B = 0 disables it
    behavior_dim: int = 0
    behavior_noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for f in dc_fields(self):
            if f.name.endswith("_range"):
                setattr(self, f.name, tuple(float(v) for v in getattr(self, f.name)))

    def validate(self):
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"latent dimension must be even and >= 2, got d={self.d}")
        pairs = self.shared_mode_pairs + self.spike_only_pairs + self.field_only_pairs
        if pairs != self.d // 2:
            raise ConfigError(f"mode pairs sum to {pairs}, expected d/2 = {self.d // 2}")
        if min(self.shared_mode_pairs, self.spike_only_pairs, self.field_only_pairs) < 0:
            raise ConfigError("mode pair counts must be nonnegative")
        for f in dc_fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if not lo <= hi:
                    raise ConfigError(f"{f.name}: empty range [{lo}, {hi}]")
        if not 0.0 <= self.stay_prob <= 1.0:
            raise ConfigError("stay_prob must lie in [0, 1]")
        if self.M < 1 or self.C < 0 or self.F < 0:
            raise ConfigError("need M >= 1 and nonnegative channel counts")
        if self.field_period_steps < 1 or self.dt_ms <= 0:
            raise ConfigError("field_period_steps >= 1 and dt_ms > 0 required")
        if self.eig_radius_range[1] >= 1.0:
            raise ConfigError("eigenvalue radii must stay below 1 for stable dynamics")
        return self

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dc_fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**doc)


def rotation_block(radius, angle):
    c, s = np.cos(angle), np.sin(angle)
    return radius * np.array([[c, -s], [s, c]])


def block_columns(mode_tags, allowed):
    """Latent coordinates belonging to blocks whose tag is in ``allowed``."""
    cols = [2 * k + o for k, tag in enumerate(mode_tags) if tag in allowed for o in (0, 1)]
    return np.array(cols, dtype=int)


def random_dynamics(cfg, rng):
    """Draw ``(A, Q, mode_tags)``.

    Draw order: ``d/2`` radii, ``d/2`` angles, ``d`` process-noise eigenvalues.
    """
    if cfg.d % 2:
        raise ConfigError(f"latent dimension must be even, got d={cfg.d}")
    for name in ("eig_radius_range", "eig_angle_range", "q_eig_range"):
        lo, hi = getattr(cfg, name)
        if lo > hi:
            raise ConfigError(f"{name}: empty range [{lo}, {hi}]")
    npairs = cfg.d // 2
    radii = rng.uniform(*cfg.eig_radius_range, size=npairs)
    angles = rng.uniform(*cfg.eig_angle_range, size=npairs)
    q = rng.uniform(*cfg.q_eig_range, size=cfg.d)
    A = np.zeros((cfg.d, cfg.d))
    for k in range(npairs):
        A[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = rotation_block(radii[k], angles[k])
    tags = (
        [SHARED] * cfg.shared_mode_pairs
        + [SPIKE_ONLY] * cfg.spike_only_pairs
        + [FIELD_ONLY] * cfg.field_only_pairs
    )
    if len(tags) != npairs:
        raise ConfigError(f"mode pairs sum to {len(tags)}, expected {npairs}")
    return A, np.diag(q), tags


def stationary_covariance(A, Q):
    """Solve ``S = A S A' + Q``; raises if ``A`` is not stable."""
    rho = np.max(np.abs(np.linalg.eigvals(A))) if A.size else 0.0
    if rho >= 1.0:
        raise SimulationError(f"dynamics not stable (spectral radius {rho:.6f})")
    S = solve_discrete_lyapunov(A, Q)
    return 0.5 * (S + S.T)


def _unit_directions(rng, n_rows, d, cols):
    u = np.zeros((n_rows, d))
    if cols.size:
        u[:, cols] = rng.standard_normal((n_rows, cols.size))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u


def random_poisson_params(cfg, mode_tags, stationary_cov, rng):
    """Draw spike tuning ``(alpha, beta)``.

    ``alpha_c = log(base_c * dt)`` with ``base_c`` in Hz.  ``beta_c`` points in a
    random direction over shared/spike-only coordinates and its norm is chosen so
    the rate reaches ``max_c`` at three stationary standard deviations of
    ``beta_c' x``.  Draw order: base rates, max rates, directions.
    """
    dt = cfg.dt_ms / 1000.0
    base = rng.uniform(*cfg.base_rate_hz_range, size=cfg.C)
    peak = rng.uniform(*cfg.max_rate_hz_range, size=cfg.C)
    u = _unit_directions(rng, cfg.C, cfg.d, block_columns(mode_tags, {SHARED, SPIKE_ONLY}))
    alpha = np.log(base * dt)
    spread = np.sqrt(np.einsum("ci,ij,cj->c", u, stationary_cov, u))
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(spread > 0, np.log(peak / base) / (3.0 * spread), 0.0)
    return alpha, u * gain[:, None]


def random_field_params(cfg, mode_tags, stationary_cov, rng):
    """Draw field loadings ``C`` and diagonal noise ``R``.

    Rows are scaled so ``2 * std(C_f x)`` equals an amplitude drawn from
    ``field_value_range``; ``R_f = C_f S C_f' / snr_f**2`` with ``snr_f`` drawn
    from ``snr_range``.  Draw order: amplitudes, SNRs, directions.
    """
    amp = rng.uniform(*cfg.field_value_range, size=cfg.F)
    snr = rng.uniform(*cfg.snr_range, size=cfg.F)
    u = _unit_directions(rng, cfg.F, cfg.d, block_columns(mode_tags, {SHARED, FIELD_ONLY}))
    spread = np.sqrt(np.einsum("fi,ij,fj->f", u, stationary_cov, u))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(spread > 0, 0.5 * amp / spread, 0.0)
    Cmat = u * scale[:, None]
    signal_var = np.einsum("fi,ij,fj->f", Cmat, stationary_cov, Cmat)
    return Cmat, np.diag(signal_var / snr**2)


def transition_matrix(M, stay_prob):
    if M == 1:
        return np.ones((1, 1))
    Phi = np.full((M, M), (1.0 - stay_prob) / (M - 1))
    np.fill_diagonal(Phi, stay_prob)
    return Phi


def random_switching_model(cfg, rng, tau=1.0):
    """Random ``M``-regime model; each regime is drawn independently."""
    cfg.validate()
    regimes = []
    first_cov = None
    for _ in range(cfg.M):
        A, Q, tags = random_dynamics(cfg, rng)
        S = stationary_covariance(A, Q)
        if first_cov is None:
            first_cov = S
        alpha, beta = random_poisson_params(cfg, tags, S, rng)
        Cmat, R = random_field_params(cfg, tags, S, rng)
        regimes.append(RegimeParams(A=A, Q=Q, alpha=alpha, beta=beta, C=Cmat, R=R))
    return SwitchingModel(
        regimes=regimes,
        Phi=transition_matrix(cfg.M, cfg.stay_prob),
        pi0=np.full(cfg.M, 1.0 / cfg.M),
        mu0=np.zeros(cfg.d),
        Lambda0=first_cov,
        tau=tau,
        dt_ms=cfg.dt_ms,
        field_period_steps=cfg.field_period_steps,
    )


def random_behavior_map(d, B, rng):
    return rng.standard_normal((B, d)) / np.sqrt(d)


def field_mask_for(T, period):
    return (np.arange(T) % period) == 0


def _cov_root(cov):
    """Symmetric square root factor ``L`` with ``L L' = cov``; tolerates singular input."""
    cov = np.asarray(cov, dtype=float)
    if cov.size == 0 or not np.any(cov):
        return np.zeros_like(cov)
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def _draw_regimes(rng, T, pi0, Phi):
    M = pi0.size
    u = rng.random(T)
    states = np.zeros(T, dtype=np.int64)
    if M == 1:
        return states
    cum_pi = np.cumsum(pi0)
    cum_phi = np.cumsum(Phi, axis=0)
    s = min(int(np.searchsorted(cum_pi, u[0] * cum_pi[-1], side="right")), M - 1)
    states[0] = s
    for t in range(1, T):
        col = cum_phi[:, s]
        s = min(int(np.searchsorted(col, u[t] * col[-1], side="right")), M - 1)
        states[t] = s
    return states


def simulate_series(model, T, rng, regime_path=None, behavior_map=None, behavior_noise_std=0.5):
    """Sample ``T`` steps from ``model``.

    Returns a :class:`MultiscaleSeries` with ground-truth ``regimes`` (1-based)
    and ``latents`` (``T + 1`` rows including ``x_0``).  Field frames exist at
    steps ``t`` (1-based) with ``(t - 1) % field_period_steps == 0``; other rows
    are NaN.  ``regime_path`` (1-based, length ``T``) overrides the Markov draw.

    Draw order: ``T`` uniforms for the regime chain, ``x_0`` normals, ``T x d``
    process-noise normals, Poisson counts, field-noise normals for available
    frames, behavior noise.
    """
    M, d = model.M, model.d
    P = model.stacked()
    period = model.field_period_steps
    mask = field_mask_for(T, period)
    C, F = model.n_neurons, model.n_features

    states = _draw_regimes(rng, T, model.pi0, model.Phi)
    if regime_path is not None:
        states = np.asarray(regime_path, dtype=np.int64).reshape(T) - 1
        if states.min() < 0 or states.max() >= M:
            raise ValueError("regime_path entries must lie in 1..M")

    x = np.zeros((T + 1, d))
    x[0] = model.mu0 + _cov_root(model.Lambda0) @ rng.standard_normal(d)
    q_roots = np.stack([_cov_root(q) for q in P["Q"]])
    noise = rng.standard_normal((T, d))
    A = P["A"]
    for t in range(T):
        s = states[t]
        x[t + 1] = A[s] @ x[t] + q_roots[s] @ noise[t]

    spikes = np.zeros((T, C), dtype=np.int64)
    if C:
        log_rate = P["alpha"][states] + np.einsum("tcd,td->tc", P["beta"][states], x[1:])
        over = np.argwhere(log_rate > RATE_EXP_LIMIT)
        if over.size:
            t, c = over[0]
            raise SimulationError(
                f"rate overflow at step {t + 1}, neuron {c + 1}: "
                f"log-rate {log_rate[t, c]:.3g} > {RATE_EXP_LIMIT}"
            )
        spikes = rng.poisson(np.exp(log_rate)).astype(np.int64)

    fields = np.full((T, F), np.nan)
    if F:
        idx = np.flatnonzero(mask)
        r_roots = np.stack([_cov_root(r) for r in P["R"]])
        eps = rng.standard_normal((idx.size, F))
        s_idx = states[idx]
        fields[idx] = np.einsum("tfd,td->tf", P["C"][s_idx], x[idx + 1]) + np.einsum(
            "tfg,tg->tf", r_roots[s_idx], eps
        )

    behavior = None
    if behavior_map is not None:
        H = np.asarray(behavior_map, dtype=float)
        behavior = x[1:] @ H.T + behavior_noise_std * rng.standard_normal((T, H.shape[0]))
    return MultiscaleSeries(
        spikes=spikes,
        fields=fields,
        field_mask=mask,
        behavior=behavior,
        regimes=states + 1,
        latents=x,
        dt_ms=model.dt_ms,
        field_period_steps=period,
    )


@dataclass
class SimulatedSystem:
    model: SwitchingModel
    train: MultiscaleSeries
    test: MultiscaleSeries
    behavior_map: np.ndarray = field(default=None)


def simulate_system(cfg, seed=None, tau=1.0):
    """One random system with independent train and test series."""
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed)
    model = random_switching_model(cfg, rng, tau=tau)
    H = random_behavior_map(cfg.d, cfg.behavior_dim, rng) if cfg.behavior_dim else None
    train = simulate_series(model, cfg.T_train, rng, behavior_map=H, behavior_noise_std=cfg.behavior_noise_std)
    test = simulate_series(model, cfg.T_test, rng, behavior_map=H, behavior_noise_std=cfg.behavior_noise_std)
    return SimulatedSystem(model=model, train=train, test=test, behavior_map=H)
