"""Config-driven experiment runner behind the ``smds`` command.

Each ``cmd_*`` function takes a resolved :class:`ExperimentConfig` and an output
directory and returns a small summary dict.  Independent work items (systems,
folds, tau grid points, fusion repeats) go through :func:`run_queue`, which
uses worker processes when ``workers > 1``; every item writes only its own
files, so results do not depend on the worker count.
"""

import csv
import hashlib
import json
import multiprocessing
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields as dc_fields, replace

import numpy as np

from . import __version__
from .bundle import read_bundle, write_bundle
from .errors import ConfigError
from .evaluate import bh_correct, evaluate_model, paired_test
from .learning import EmConfig, FitAborted, em_fit
from .model import concat_series, load_model, save_model
from .simulate import SimConfig, simulate_system

MODES = ("simulate", "fit", "eval", "xval", "sweep-tau", "fusion-sweep")
# method -> (modality, switching)
METHODS = {
    "kf-em": ("gaussian-only", False),
    "pcf-em": ("poisson-only", False),
    "msnf-em": ("multiscale", False),
    "skf-em": ("gaussian-only", True),
    "spcf-em": ("poisson-only", True),
    "smsnf-em": ("multiscale", True),
}
DEFAULT_TAU_GRID = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
DEFAULT_SWITCHING_M = 2
MIN_FOLD_STEPS = 10


@dataclass
class FusionConfig:
    base_modality: str = "fields"
    base_channels: int = 5
    added_channels: list = field(default_factory=lambda: [0, 5, 10, 20])
    repeats: int = 1

    def validate(self):
        if self.base_modality not in ("fields", "spikes"):
            raise ConfigError(f"fusion.base_modality must be 'fields' or 'spikes', got {self.base_modality!r}")
        if self.base_channels < 1 or self.repeats < 1:
            raise ConfigError("fusion.base_channels and fusion.repeats must be >= 1")
        if not self.added_channels or min(self.added_channels) < 0:
            raise ConfigError("fusion.added_channels must be a nonempty list of counts >= 0")
        return self


@dataclass
class ExperimentConfig:
    """Resolved experiment settings.

    ``em`` keeps the user's EM settings as given; :meth:`em_config` turns them
    into the configuration implied by a method name.  ``paths`` may hold
    ``train``, ``test``, ``bundle``, ``model`` and ``true_model``.
    """

    mode: str = None
    sim: SimConfig = field(default_factory=SimConfig)
    em: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["msnf-em"])
    folds: int = 5
    inner_folds: int = 4
    tau_grid: list = None
    fusion: FusionConfig = field(default_factory=FusionConfig)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    systems: int = 1
    smooth: bool = True

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        known = {f.name for f in dc_fields(cls)} | {"method"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment settings: {sorted(unknown)}")
        if "method" in doc and "methods" in doc:
            raise ConfigError("give either 'method' or 'methods', not both")
        methods = doc.pop("method", None) or doc.pop("methods", None) or ["msnf-em"]
        if isinstance(methods, str):
            methods = [methods]
        seed = int(doc.pop("seed", 0))
        sim = dict(doc.pop("sim", None) or {})
        sim.setdefault("seed", seed)
        fusion = doc.pop("fusion", None) or {}
        try:
            fusion = FusionConfig(**fusion)
        except TypeError as exc:
            raise ConfigError(f"fusion settings: {exc}") from None
        em = dict(doc.pop("em", None) or {})
        em.setdefault("seed", seed)
        return cls(sim=SimConfig.from_dict(sim), em=em, methods=list(methods), fusion=fusion, seed=seed, **doc)

    def with_seed(self, seed):
        sim = replace(self.sim, seed=int(seed))
        return replace(self, seed=int(seed), sim=sim, em={**self.em, "seed": int(seed)})

    def validate(self):
        if self.mode is not None and self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.methods:
            raise ConfigError("no method given")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods listed twice")
        unknown = set(self.em) - {f.name for f in dc_fields(EmConfig)}
        if unknown:
            raise ConfigError(f"unknown EM settings: {sorted(unknown)}")
        if "modality" in self.em:
            clash = [m for m in self.methods if METHODS[m][0] != self.em["modality"]]
            if clash:
                raise ConfigError(f"em.modality={self.em['modality']!r} contradicts method(s) {clash}")
        if "M" in self.em:
            M = int(self.em["M"])
            switching = [m for m in self.methods if METHODS[m][1]]
            if M >= 2 and not switching:
                raise ConfigError(f"{self.methods} are stationary methods but {M} regimes were requested")
            if M < 2 and switching:
                raise ConfigError(f"{switching} need at least 2 regimes, got M={M}")
        for m in self.methods:
            self.em_config(m).validate()
        if self.folds < 2 or self.inner_folds < 2:
            raise ConfigError("folds and inner_folds must be >= 2")
        grid = self.tau_grid
        if grid is not None and (len(grid) == 0 or any(not float(t) > 0 for t in grid)):
            raise ConfigError("tau_grid must be a nonempty list of positive numbers")
        if self.systems < 1:
            raise ConfigError("systems must be >= 1")
        self.sim.validate()
        self.fusion.validate()
        return self

    def em_config(self, method, **overrides):
        """EM configuration implied by ``method``.

        Stationary methods always use one regime; switching methods use the
        configured ``M`` (default 2).
        """
        modality, switching = METHODS[method]
        settings = dict(self.em)
        settings["modality"] = modality
        settings["M"] = int(settings.get("M", DEFAULT_SWITCHING_M)) if switching else 1
        settings.update(overrides)
        return EmConfig(**settings)

    def grid(self):
        return sorted(float(t) for t in (DEFAULT_TAU_GRID if self.tau_grid is None else self.tau_grid))

    def to_dict(self):
        doc = asdict(self)
        doc["tau_grid"] = self.grid()
        return doc

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path):
    import yaml

    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping of settings")
    return ExperimentConfig.from_dict(doc)


# -- plumbing ------------------------------------------------------------------------

def run_queue(func, items, workers=1):
    """``[func(*item) for item in items]``, in worker processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(*item) for item in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as pool:
        futures = [pool.submit(func, *item) for item in items]
        return [f.result() for f in futures]


def _path(cfg, *keys, required=True):
    for key in keys:
        if cfg.paths.get(key):
            return cfg.paths[key]
    if required:
        raise ConfigError(f"missing path: set paths.{keys[0]}")
    return None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def fold_bounds(T, folds):
    """Contiguous ``(start, stop)`` blocks partitioning ``0..T-1``."""
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if T // folds < MIN_FOLD_STEPS:
        raise ConfigError(f"T={T} is too short for {folds} folds of at least {MIN_FOLD_STEPS} steps")
    edges = [round(k * T / folds) for k in range(folds + 1)]
    return list(zip(edges[:-1], edges[1:]))


def split_fold(series, start, stop):
    """(training part, held-out block); the training part joins the remaining pieces."""
    parts = [p for p in (series.slice(0, start), series.slice(stop, series.T)) if p.T]
    return concat_series(parts), series.slice(start, stop)


def view_for(model, series):
    """``series`` restricted to the modalities ``model`` observes."""
    if model.n_neurons == 0 and series.n_neurons:
        series = series.select_channels(neurons=[])
    if model.n_features == 0 and series.n_features:
        series = series.select_channels(features=[])
    if (model.n_neurons, model.n_features) != (series.n_neurons, series.n_features):
        raise ConfigError(
            f"model has {model.n_neurons} neurons / {model.n_features} field features, "
            f"data has {series.n_neurons} / {series.n_features}"
        )
    return series


def _write_fit(out_dir, model, trace):
    os.makedirs(out_dir, exist_ok=True)
    save_model(model, os.path.join(out_dir, "model.json"))
    trace.write(os.path.join(out_dir, "fit.log"))
    if trace.warnings:
        with open(os.path.join(out_dir, "fit_warnings.txt"), "w") as fh:
            fh.write("\n".join(trace.warnings) + "\n")


def fit_and_save(series, em_cfg, out_dir):
    """Run EM and write ``model.json`` plus ``fit.log``; partial output on abort."""
    try:
        model, trace = em_fit(series, em_cfg)
    except FitAborted as exc:
        _write_fit(out_dir, exc.model, exc.trace)
        with open(os.path.join(out_dir, "fit.log"), "a") as fh:
            fh.write(f"aborted,{exc.trace.aborted}\n")
        raise
    _write_fit(out_dir, model, trace)
    return model, trace


def _hash_path(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                h.update(name.encode())
                h.update(_hash_path(full).encode())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_manifest(out, cfg, command, summary=None):
    import numba
    import scipy

    outputs = []
    for root, _, files in os.walk(out):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out)
            if rel != "manifest.json":
                outputs.append(rel)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "inputs": {k: {"path": v, "sha256": _hash_path(v)} for k, v in sorted(cfg.paths.items()) if v and os.path.exists(v)},
        "outputs": sorted(outputs),
        "summary": summary or {},
        "versions": {
            "smds": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "python": platform.python_version(),
        },
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1, default=float)
        fh.write("\n")
    return manifest


# -- commands ------------------------------------------------------------------------

def _simulate_one(sim, seed, out_dir):
    system = simulate_system(sim, seed=seed)
    write_bundle(os.path.join(out_dir, "train"), system.train, M_true=sim.M, exist_ok=True)
    write_bundle(os.path.join(out_dir, "test"), system.test, M_true=sim.M, exist_ok=True)
    save_model(system.model, os.path.join(out_dir, "true_model.json"))
    if system.behavior_map is not None:
        _write_rows(
            os.path.join(out_dir, "behavior_map.csv"),
            [f"x{i}" for i in range(1, sim.d + 1)],
            ([repr(float(v)) for v in row] for row in system.behavior_map),
        )
    return {"seed": seed, "T_train": system.train.T, "T_test": system.test.T}


def cmd_simulate(cfg, out, workers=1):
    """Train/test bundles and the true model; ``system_NNN`` subdirectories when ``systems > 1``."""
    seeds = [cfg.sim.seed + k for k in range(cfg.systems)]
    dirs = [out] if cfg.systems == 1 else [os.path.join(out, f"system_{k + 1:03d}") for k in range(cfg.systems)]
    rows = run_queue(_simulate_one, [(cfg.sim, s, d) for s, d in zip(seeds, dirs)], workers)
    return {"systems": rows}


def cmd_fit(cfg, out, workers=1):
    if len(cfg.methods) != 1:
        raise ConfigError("fit takes exactly one method")
    series = read_bundle(_path(cfg, "train", "bundle"))
    em_cfg = cfg.em_config(cfg.methods[0])
    em_cfg.validate()
    model, trace = fit_and_save(series, em_cfg, out)
    return {"method": cfg.methods[0], "iterations": len(trace), "final_elbo": trace.elbo[-1] if trace.elbo else None}


def cmd_eval(cfg, out, workers=1):
    model = load_model(_path(cfg, "model"))
    full = read_bundle(_path(cfg, "test", "bundle"))
    series = view_for(model, full)
    true_path = _path(cfg, "true_model", required=False)
    true_model = load_model(true_path) if true_path else None
    if true_model is not None:
        view_for(true_model, full)
    train_path = _path(cfg, "train", required=False)
    train = view_for(model, read_bundle(train_path)) if train_path else None
    report = evaluate_model(model, series, true_model=true_model, train=train, smooth=cfg.smooth, true_series=full)
    report.write(os.path.join(out, "report.txt"), os.path.join(out, "per_dim.csv"))
    return report.scalars()


def _xval_item(cfg, series, method, k, start, stop, out_dir, true_model):
    train, held = split_fold(series, start, stop)
    model, _ = fit_and_save(train, cfg.em_config(method), out_dir)
    report = evaluate_model(
        model,
        view_for(model, held),
        true_model=true_model,
        train=view_for(model, train),
        smooth=cfg.smooth,
        true_series=held,
    )
    report.write(os.path.join(out_dir, "report.txt"), os.path.join(out_dir, "per_dim.csv"))
    return report.scalars()


def crossvalidate(cfg, series, out, workers=1, true_model=None):
    """Per-fold scores ``{method: [scalars per fold]}`` written under ``out/folds``."""
    bounds = fold_bounds(series.T, cfg.folds)
    items = [
        (cfg, series, m, k, start, stop, os.path.join(out, "folds", f"fold_{k + 1}", m), true_model)
        for k, (start, stop) in enumerate(bounds)
        for m in cfg.methods
    ]
    results = run_queue(_xval_item, items, workers)
    scores = {m: [] for m in cfg.methods}
    for item, res in zip(items, results):
        scores[item[2]].append(res)
    return bounds, scores


def aggregate(scores):
    """``(method, metric, mean, standard error, n)`` rows for metrics present in every fold."""
    rows = []
    for method, folds in scores.items():
        metrics = [k for k in folds[0] if all(k in f for f in folds)]
        for metric in metrics:
            vals = np.array([f[metric] for f in folds], dtype=float)
            se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else float("nan")
            rows.append((method, metric, float(vals.mean()), float(se), vals.size))
    return rows


def compare_methods(scores, q=0.05):
    """Paired Wilcoxon tests for every method pair and shared metric, BH-corrected together."""
    methods = list(scores)
    tests = []
    for i, a in enumerate(methods):
        for b in methods[i + 1 :]:
            shared = [k for k in scores[a][0] if all(k in f for f in scores[a] + scores[b])]
            for metric in shared:
                va = np.array([f[metric] for f in scores[a]], dtype=float)
                vb = np.array([f[metric] for f in scores[b]], dtype=float)
                tests.append([a, b, metric, float(np.mean(va - vb)), paired_test(va, vb)])
    if tests:
        reject = bh_correct([t[4] for t in tests], q)
        for t, r in zip(tests, reject):
            t.append(bool(r))
    return tests


def cmd_xval(cfg, out, workers=1):
    series = read_bundle(_path(cfg, "bundle", "train"))
    true_path = _path(cfg, "true_model", required=False)
    true_model = load_model(true_path) if true_path else None
    bounds, scores = crossvalidate(cfg, series, out, workers, true_model)
    _write_rows(
        os.path.join(out, "folds.csv"),
        ["fold", "start", "stop", "method", "metric", "value"],
        (
            [k + 1, start + 1, stop, m, metric, _num(v)]
            for m, folds in scores.items()
            for k, ((start, stop), f) in enumerate(zip(bounds, folds))
            for metric, v in f.items()
        ),
    )
    rows = aggregate(scores)
    _write_rows(
        os.path.join(out, "aggregate.csv"),
        ["method", "metric", "mean", "se", "n"],
        ([m, k, _num(mean), _num(se), n] for m, k, mean, se, n in rows),
    )
    summary = {"folds": len(bounds), "aggregate": {f"{m}:{k}": mean for m, k, mean, _, _ in rows}}
    if len(cfg.methods) > 1:
        tests = compare_methods(scores)
        _write_rows(
            os.path.join(out, "tests.csv"),
            ["method_a", "method_b", "metric", "mean_difference", "p_value", "bh_reject"],
            ([a, b, k, _num(d), _num(p), int(r)] for a, b, k, d, p, r in tests),
        )
        summary["tests"] = len(tests)
    return summary


def _tau_item(cfg, series, tau, start, stop, out_dir):
    train, held = split_fold(series, start, stop)
    model, _ = fit_and_save(train, cfg.em_config("msnf-em", tau=tau), out_dir)
    report = evaluate_model(model, held, train=train, smooth=False)
    return report.behavior_cc


def cmd_sweep_tau(cfg, out, workers=1):
    """Pick tau by inner cross-validated behavior decoding with the stationary multiscale fit.

    Ties go to the smallest tau.  A single-value grid is returned without fitting.
    """
    grid = cfg.grid()
    note = "default" if cfg.tau_grid is None else "config"
    if len(grid) == 1:
        rows, chosen = [], grid[0]
        summary_rows = [[repr(grid[0]), "", ""]]
    else:
        series = read_bundle(_path(cfg, "train", "bundle"))
        if series.behavior is None:
            raise ConfigError("sweep-tau needs behavior.csv in the training bundle")
        bounds = fold_bounds(series.T, cfg.inner_folds)
        items = [
            (cfg, series, tau, start, stop, os.path.join(out, "fits", f"tau_{i + 1}", f"fold_{k + 1}"))
            for i, tau in enumerate(grid)
            for k, (start, stop) in enumerate(bounds)
        ]
        ccs = run_queue(_tau_item, items, workers)
        rows = [[repr(it[2]), k % len(bounds) + 1, _num(cc)] for k, (it, cc) in enumerate(zip(items, ccs))]
        table = np.array(ccs, dtype=float).reshape(len(grid), len(bounds))
        means = table.mean(axis=1)
        ses = table.std(axis=1, ddof=1) / np.sqrt(table.shape[1])
        # argmax returns the first maximum, i.e. the smallest tau on ties
        chosen = grid[int(np.argmax(np.where(np.isfinite(means), means, -np.inf)))]
        summary_rows = [[repr(t), _num(m), _num(s)] for t, m, s in zip(grid, means, ses)]
    _write_rows(os.path.join(out, "tau_folds.csv"), ["tau", "fold", "behavior_cc"], rows)
    _write_rows(os.path.join(out, "tau_table.csv"), ["tau", "mean_behavior_cc", "se"], summary_rows)
    with open(os.path.join(out, "tau.txt"), "w") as fh:
        fh.write(f"tau={chosen!r}\ngrid={note}:{' '.join(repr(t) for t in grid)}\n")
    return {"tau": chosen, "grid": grid, "grid_source": note}


def _single_scale(method, base_modality):
    switching = METHODS[method][1]
    if base_modality == "fields":
        return "skf-em" if switching else "kf-em"
    return "spcf-em" if switching else "pcf-em"


def fusion_subsets(cfg, n_neurons, n_features):
    """``[(repeat, base indices, added order)]`` with 0-based channel indices.

    Added channels for a count ``k`` are the first ``k`` of the added order, so
    larger counts extend smaller ones within a repeat.
    """
    fz = cfg.fusion
    base_pool, added_pool = (n_features, n_neurons) if fz.base_modality == "fields" else (n_neurons, n_features)
    if fz.base_channels > base_pool:
        raise ConfigError(f"fusion asks for {fz.base_channels} base channels, bundle has {base_pool}")
    if max(fz.added_channels) > added_pool:
        raise ConfigError(f"fusion asks for {max(fz.added_channels)} added channels, bundle has {added_pool}")
    out = []
    for r in range(fz.repeats):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, r])))
        base = np.sort(rng.choice(base_pool, fz.base_channels, replace=False))
        order = rng.permutation(added_pool)
        out.append((r + 1, base, order))
    return out


def fusion_channels(cfg, base, order, k):
    added = np.sort(order[:k])
    if cfg.fusion.base_modality == "fields":
        return {"neurons": added, "features": base}
    return {"neurons": base, "features": added}


def cmd_fusion_sweep(cfg, out, workers=1):
    """Behavior CC as channels of the other modality are added to a fixed base set.

    The zero-added point is the single-scale method on the base channels.
    """
    method = cfg.methods[0]
    if METHODS[method][0] != "multiscale":
        raise ConfigError(f"fusion-sweep needs a multiscale method, got {method}")
    series = read_bundle(_path(cfg, "bundle", "train"))
    if series.n_neurons == 0 or series.n_features == 0:
        raise ConfigError("fusion-sweep needs both spikes and fields in the bundle")
    if series.behavior is None:
        raise ConfigError("fusion-sweep needs behavior.csv")
    bounds = fold_bounds(series.T, cfg.folds)
    subsets = fusion_subsets(cfg, series.n_neurons, series.n_features)
    single = _single_scale(method, cfg.fusion.base_modality)
    counts = sorted(set(cfg.fusion.added_channels))

    items, keys, subset_rows = [], [], []
    for r, base, order in subsets:
        for k in counts:
            chans = fusion_channels(cfg, base, order, k)
            sub = series.select_channels(**chans)
            sub_cfg = replace(cfg, methods=[single if k == 0 else method], folds=cfg.folds)
            name = f"repeat_{r}/added_{k}"
            subset_rows.append([
                r, k, " ".join(str(i + 1) for i in base), " ".join(str(i + 1) for i in np.sort(order[:k]))
            ])
            for f, (start, stop) in enumerate(bounds):
                items.append(
                    (sub_cfg, sub, sub_cfg.methods[0], f, start, stop, os.path.join(out, name, f"fold_{f + 1}"), None)
                )
                keys.append((r, k, f + 1))
    results = run_queue(_xval_item, items, workers)

    fold_rows, by_point = [], {}
    for (r, k, f), res in zip(keys, results):
        cc = res.get("behavior_cc")
        fold_rows.append([cfg.fusion.base_channels, k, r, f, _num(cc)])
        by_point.setdefault((r, k), []).append(np.nan if cc is None else cc)
    curve = [[cfg.fusion.base_channels, k, r, float(np.mean(v))] for (r, k), v in sorted(by_point.items())]
    _write_rows(
        os.path.join(out, "fusion.csv"),
        ["base_count", "added_count", "repeat", "behavior_cc"],
        ([b, k, r, _num(cc)] for b, k, r, cc in curve),
    )
    _write_rows(
        os.path.join(out, "fusion_folds.csv"), ["base_count", "added_count", "repeat", "fold", "behavior_cc"], fold_rows
    )
    _write_rows(
        os.path.join(out, "subsets.csv"), ["repeat", "added_count", "base_channels", "added_channels"], subset_rows
    )
    return {"base_modality": cfg.fusion.base_modality, "single_scale_method": single, "points": len(curve)}


def _study_item(cfg, seed):
    system = simulate_system(cfg.sim, seed=seed)
    row = {"seed": seed, "T_test": system.test.T}
    for method in cfg.methods:
        # the system seed also seeds EM, so every method starts from the same draws
        em_cfg = cfg.em_config(method, seed=seed)
        try:
            model, _ = em_fit(system.train, em_cfg)
            aborted = None
        except FitAborted as exc:
            model, aborted = exc.model, exc.trace.aborted
        report = evaluate_model(
            model, view_for(model, system.test), true_model=system.model, smooth=cfg.smooth, true_series=system.test
        )
        row[method] = report.scalars()
        if aborted:
            row[method]["aborted"] = aborted
    return row


def simulation_study(cfg, seeds, workers=1):
    """Simulate one system per seed, fit every configured method, score on the test series.

    Returns one dict per system: ``{"seed", "T_test", method: metric scalars}``.
    Normalized metrics divide by the true model decoding the full test data.
    """
    return run_queue(_study_item, [(cfg, int(s)) for s in seeds], workers)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "xval": cmd_xval,
    "sweep-tau": cmd_sweep_tau,
    "fusion-sweep": cmd_fusion_sweep,
}


def run(cfg, command, out, workers=1, force=False):
    """Validate, check the output directory, run ``command`` and write the manifest."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if cfg.mode is not None and cfg.mode != command:
        raise ConfigError(f"config is for mode {cfg.mode!r}, command is {command!r}")
    cfg.validate()
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
    os.makedirs(out, exist_ok=True)
    summary = COMMANDS[command](cfg, out, workers)
    write_manifest(out, cfg, command, summary)
    return summary
