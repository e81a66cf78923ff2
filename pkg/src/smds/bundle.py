"""On-disk dataset bundles.

A bundle is a directory holding ``meta.json`` plus one CSV per signal::

    spikes.csv     T x C integer counts
    fields.csv     T x F, a row of empty cells where no field frame exists
    behavior.csv   T x B (optional)
    regimes.csv    T x 1, 1-based labels (optional)
    latents.csv    (T + 1) x d simulator ground truth including x_0 (optional)

Every CSV has one header row.  Floats are written with ``repr`` so a write /
read round trip is exact and repeated writes are byte-identical.
"""

import csv
import json
import os

import numpy as np

from .errors import ModelFormatError
from .model import MultiscaleSeries
from .simulate import field_mask_for

SCHEMA_VERSION = 1
_OPTIONAL = ("behavior", "regimes", "latents")


def _cell(v):
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_bundle(path, series, M_true=None, exist_ok=False):
    """Write ``series`` as a bundle directory at ``path``."""
    os.makedirs(path, exist_ok=exist_ok)
    T, C, F = series.T, series.n_neurons, series.n_features
    B = 0 if series.behavior is None else series.behavior.shape[1]
    meta = {
        "schema_version": SCHEMA_VERSION,
        "T": T,
        "C": C,
        "F": F,
        "B": B,
        "dt_ms": float(series.dt_ms),
        "field_period_steps": int(series.field_period_steps),
    }
    if M_true is not None:
        meta["M_true"] = int(M_true)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")

    _write_csv(
        os.path.join(path, "spikes.csv"),
        [f"n{i}" for i in range(1, C + 1)],
        ([str(int(v)) for v in row] for row in series.spikes),
    )
    _write_csv(
        os.path.join(path, "fields.csv"),
        [f"f{i}" for i in range(1, F + 1)],
        (
            [_cell(v) for v in row] if keep else [""] * F
            for row, keep in zip(series.fields, series.field_mask)
        ),
    )
    if series.behavior is not None:
        _write_csv(
            os.path.join(path, "behavior.csv"),
            [f"b{i}" for i in range(1, B + 1)],
            ([_cell(v) for v in row] for row in series.behavior),
        )
    if series.regimes is not None:
        _write_csv(os.path.join(path, "regimes.csv"), ["regime"], ([str(int(s))] for s in series.regimes))
    if series.latents is not None:
        d = series.latents.shape[1]
        _write_csv(
            os.path.join(path, "latents.csv"),
            [f"x{i}" for i in range(1, d + 1)],
            ([_cell(v) for v in row] for row in series.latents),
        )


def _read_csv(path, n_rows, n_cols, what):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ModelFormatError(f"{what}: missing header row")
    body = rows[1:]
    if len(body) != n_rows:
        raise ModelFormatError(f"{what}: expected {n_rows} rows, found {len(body)}")
    for k, row in enumerate(body, start=1):
        if len(row) != n_cols:
            raise ModelFormatError(f"{what}: row {k} has {len(row)} cells, expected {n_cols}")
    return body


def _floats(body, n_cols, what, allow_empty=False):
    out = np.full((len(body), n_cols), np.nan)
    for i, row in enumerate(body):
        for j in range(n_cols):
            cell = row[j].strip()
            if cell == "":
                if not allow_empty:
                    raise ModelFormatError(f"{what}: empty cell at row {i + 1}, column {j + 1}")
                continue
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise ModelFormatError(f"{what}: bad number {cell!r} at row {i + 1}") from None
    return out


def read_meta(path):
    try:
        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"meta.json: {exc}") from None
    missing = {"schema_version", "T", "C", "F", "dt_ms", "field_period_steps"} - set(meta)
    if missing:
        raise ModelFormatError(f"meta.json lacks {sorted(missing)}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported bundle schema {meta['schema_version']}")
    return meta


def read_bundle(path):
    """Load a bundle directory into a :class:`MultiscaleSeries`."""
    meta = read_meta(path)
    T, C, F = int(meta["T"]), int(meta["C"]), int(meta["F"])
    period = int(meta["field_period_steps"])

    body = _read_csv(os.path.join(path, "spikes.csv"), T, C, "spikes.csv")
    spikes = _floats(body, C, "spikes.csv")
    if np.any(spikes != np.round(spikes)) or np.any(spikes < 0):
        raise ModelFormatError("spikes.csv: counts must be nonnegative integers")

    body = _read_csv(os.path.join(path, "fields.csv"), T, F, "fields.csv")
    fields = _floats(body, F, "fields.csv", allow_empty=True)
    if F:
        present = ~np.isnan(fields)
        mask = present.all(axis=1)
        partial = present.any(axis=1) & ~mask
        if partial.any():
            raise ModelFormatError(f"fields.csv: row {int(np.argmax(partial)) + 1} is partially empty")
    else:
        mask = field_mask_for(T, period)

    extra = {}
    bpath = os.path.join(path, "behavior.csv")
    if os.path.exists(bpath):
        B = int(meta.get("B", 0))
        extra["behavior"] = _floats(_read_csv(bpath, T, B, "behavior.csv"), B, "behavior.csv")
    rpath = os.path.join(path, "regimes.csv")
    if os.path.exists(rpath):
        labels = _floats(_read_csv(rpath, T, 1, "regimes.csv"), 1, "regimes.csv")[:, 0]
        if np.any(labels < 1) or np.any(labels != np.round(labels)):
            raise ModelFormatError("regimes.csv: labels must be positive integers")
        extra["regimes"] = labels.astype(np.int64)
    lpath = os.path.join(path, "latents.csv")
    if os.path.exists(lpath):
        with open(lpath, newline="") as fh:
            d = len(next(csv.reader(fh), []))
        extra["latents"] = _floats(_read_csv(lpath, T + 1, d, "latents.csv"), d, "latents.csv")

    try:
        return MultiscaleSeries(
            spikes=spikes.astype(np.int64),
            fields=fields,
            field_mask=mask,
            dt_ms=float(meta["dt_ms"]),
            field_period_steps=period,
            **extra,
        )
    except ValueError as exc:
        raise ModelFormatError(f"bundle {path}: {exc}") from None
