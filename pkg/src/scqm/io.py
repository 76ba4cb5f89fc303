"""Plain-text persistence: CSV point sets, model JSON, TOML configs.

Floats are written with ``repr``, the shortest decimal that round-trips to
the same double, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .losses import LossSpec, format_loss, parse_loss
from .optimizer import TRACE_COLUMNS, FitConfig, FitTrace
from .quadmap import VECH_ORDERING, QuadraticModel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

FORMAT_VERSION = 1


class FormatError(OSError):
    """A file exists but its content is malformed."""


def fmt(x) -> str:
    """Shortest round-trip decimal; integers stay integers."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_points(path, X, prefix: str = "x") -> None:
    """Write a ``(D, n)`` matrix as CSV, one sample per row."""
    X = np.asarray(X, dtype=float)
    _write_rows(path, [f"{prefix}{k}" for k in range(X.shape[0])], X.T)


def read_points(path) -> np.ndarray:
    """Read a CSV written by :func:`write_points` (or any numeric CSV with a
    header row); returns a ``(D, n)`` matrix."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        X = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric entry ({exc})") from None
    if X.size == 0:
        raise FormatError(f"{path}: no data rows")
    if X.ndim != 2 or X.shape[1] != len(header):
        raise FormatError(f"{path}: rows do not match the {len(header)} header columns")
    if not np.all(np.isfinite(X)):
        raise FormatError(f"{path}: non-finite entries")
    return X.T


def _clean_path(path: Path) -> Path:
    return path.with_name(path.stem + "_clean" + path.suffix)


def _meta_path(path: Path) -> Path:
    return path.with_name("meta.json")


def save_dataset(path, ds: Dataset) -> list:
    """Write ``data.csv``, ``data_clean.csv`` (when known) and ``meta.json``
    next to it.  Returns the paths written."""
    path = Path(path)
    write_points(path, ds.X)
    out = [path]
    if ds.X_clean is not None:
        write_points(_clean_path(path), ds.X_clean)
        out.append(_clean_path(path))
    write_json(_meta_path(path), ds.meta)
    out.append(_meta_path(path))
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    X = read_points(path)
    clean = _clean_path(path)
    X_clean = read_points(clean) if clean.exists() else None
    meta_file = _meta_path(path)
    meta = read_json(meta_file) if meta_file.exists() else {}
    return Dataset(X, X_clean, meta)


def write_json(path, obj) -> None:
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    try:
        with Path(path).open() as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


# --------------------------------------------------------------------------
# models


def model_to_dict(model: QuadraticModel, loss=None) -> dict:
    """``Q`` is stored column-major and ``Theta`` row-major, both flat."""
    out = {
        "format": FORMAT_VERSION,
        "D": model.D,
        "d": model.d,
        "s": model.s,
        "vech": VECH_ORDERING,
        "c": [float(v) for v in model.c],
        "Q": [float(v) for v in model.Q.ravel(order="F")],
        "Theta": [float(v) for v in model.Theta.ravel(order="C")],
    }
    if loss is not None:
        out["loss"] = loss if isinstance(loss, str) else format_loss(loss)
    return out


def model_from_dict(obj: dict):
    """Inverse of :func:`model_to_dict`; returns ``(model, loss or None)``."""
    try:
        D, d, s = int(obj["D"]), int(obj["d"]), int(obj["s"])
        if obj.get("vech", VECH_ORDERING) != VECH_ORDERING:
            raise FormatError(f"unsupported vech ordering {obj['vech']!r}")
        m = d * (d + 1) // 2
        c = np.array(obj["c"], dtype=float)
        Q = np.array(obj["Q"], dtype=float).reshape((D, d + s), order="F")
        Theta = np.array(obj["Theta"], dtype=float).reshape((m, s), order="C")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model document: {exc}") from None
    model = QuadraticModel(c=c, Q=Q, Theta=Theta, d=d)
    loss = parse_loss(obj["loss"]) if obj.get("loss") else None
    return model, loss


def save_model(path, model: QuadraticModel, loss=None) -> None:
    write_json(path, model_to_dict(model, loss))


def load_model(path):
    return model_from_dict(read_json(path))


# --------------------------------------------------------------------------
# configs and traces

DENOISE_KEYS = ("K", "d", "s", "loss", "linear_ablation")


def save_config(path, cfg: FitConfig, **extra) -> None:
    """Flat TOML with the :class:`FitConfig` fields plus any ``extra`` keys
    (for example the denoising ``K``, ``d``, ``s``)."""
    doc = cfg.to_dict()
    for key, val in extra.items():
        doc[key] = format_loss(val) if isinstance(val, LossSpec) else val
    with Path(path).open("wb") as fh:
        tomli_w.dump(doc, fh)


def load_config(path):
    """Returns ``(FitConfig, other_keys)`` from a flat TOML file."""
    try:
        with Path(path).open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: invalid TOML ({exc})") from None
    fit_keys = set(FitConfig.__dataclass_fields__)
    other = {k: v for k, v in doc.items() if k not in fit_keys}
    unknown = set(other) - set(DENOISE_KEYS)
    if unknown:
        raise FormatError(f"{path}: unknown config keys {sorted(unknown)}")
    try:
        cfg = FitConfig.from_dict({k: v for k, v in doc.items() if k in fit_keys})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return cfg, other


def write_trace(path, trace: FitTrace) -> None:
    _write_rows(path, TRACE_COLUMNS, trace.rows())


def read_trace(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(header)
    return {h: np.array([float(v) for v in col]) for h, col in zip(header, cols)}


def write_bench(out_dir, report) -> tuple:
    """``bench_table.csv`` (rows sigma, columns ``loss|variant``) and the long
    per-point ``bench_errors.csv``."""
    out_dir = Path(out_dir)
    header, rows = report.table()
    table = out_dir / "bench_table.csv"
    errors = out_dir / "bench_errors.csv"
    _write_rows(table, header, rows)
    _write_rows(
        errors,
        ["sigma", "loss", "variant", "seed", "index", "squared_error"],
        report.errors,
    )
    return table, errors


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None
