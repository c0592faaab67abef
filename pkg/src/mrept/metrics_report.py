"""Error metrics, convergence logs and slice exports.

Slices are written with x along image columns and y along rows, the largest
y at the top.  PGM images are 8-bit binary (P5), min-max windowed; the window
goes into a JSON sidecar next to the image.  CSV values are written with 17
significant digits so they re-parse bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .grid import Grid3D

LOG_COLUMNS = ("iteration", "step_norm", "error", "J", "anomaly", "solver_iterations")


def l2_error(gamma, gamma_true, grid: Grid3D, region=None) -> float:
    """``sqrt(sum_region |gamma - gamma*|^2 vol)``."""
    diff = np.asarray(gamma) - np.asarray(gamma_true)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise ValueError("empty region")
        diff = diff[region]
    return float(np.sqrt(np.sum(np.abs(diff) ** 2) * grid.cell_volume))


def anomaly_accuracy(gamma, gamma_true, S) -> float:
    """Mean of ``|gamma / gamma* - 1|`` over the anomaly support ``S``."""
    S = np.asarray(S, dtype=bool)
    if not S.any():
        raise ValueError("empty anomaly region")
    truth = np.asarray(gamma_true)[S]
    if np.any(truth == 0):
        raise ValueError("true admittivity vanishes on the anomaly region")
    # |g/g* - 1| written as |g - g*| / |g*| so that equality gives exactly 0
    return float(np.mean(np.abs(np.asarray(gamma)[S] - truth) / np.abs(truth)))


def _slice(field: np.ndarray, z_index: int) -> np.ndarray:
    field = np.asarray(field)
    if np.iscomplexobj(field):
        raise ValueError("export a real field (e.g. conductivity), not a complex one")
    nz = field.shape[2]
    if not 0 <= z_index < nz:
        raise IndexError(f"z_index {z_index} outside 0..{nz - 1}")
    # rows = y (top row is the largest y), columns = x
    return field[:, :, z_index].T[::-1]


def export_slice(field, z_index: int, path, fmt: str | None = None, window=None, **meta) -> Path:
    """Write the slice ``field[:, :, z_index]`` as PGM or CSV.

    ``window=(lo, hi)`` fixes the gray-level mapping; by default the slice
    minimum and maximum are used (a constant slice maps to mid gray).
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    img = _slice(field, z_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    side = {"z_index": int(z_index), "rows": "y (descending)", "columns": "x (ascending)", **meta}
    if fmt == "csv":
        np.savetxt(path, img, fmt="%.17g", delimiter=",")
    elif fmt == "pgm":
        finite = img[np.isfinite(img)]
        lo, hi = window if window is not None else (
            (float(finite.min()), float(finite.max())) if finite.size else (0.0, 0.0))
        if hi > lo:
            levels = np.clip(np.round((img - lo) / (hi - lo) * 255.0), 0, 255)
        else:
            levels = np.full(img.shape, 128.0)
        levels = np.where(np.isfinite(img), levels, 0).astype(np.uint8)
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + levels.tobytes())
        side["window"] = [lo, hi]
    else:
        raise ValueError(f"unknown slice format {fmt!r} (use pgm or csv)")
    path.with_name(path.name + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 image written by :func:`export_slice`."""
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def _solver_iterations(result, i: int) -> int:
    """Linear-solver iterations spent on step ``i`` (forward plus adjoint for Newton)."""
    reports = list(getattr(result, "reports", []))
    if i >= len(reports):
        return 0
    rep = reports[i]
    reps = rep if isinstance(rep, tuple) else (rep,)
    return int(sum(r.iterations for r in reps))


def history_rows(result) -> list[dict]:
    """One row per iteration of an init history or a Newton result.

    Newton rows are ``n = 1..N`` (``J`` and metrics at ``gamma_n``); the
    values at ``n = 0`` are returned separately by :func:`initial_row`.
    """
    steps = list(result.step_norms)
    J = list(getattr(result, "J", []))
    errors = list(result.errors)
    anomaly = list(getattr(result, "anomaly", []))
    offset = 1 if J else 0  # Newton histories carry the n = 0 values first
    rows = []
    for i, s in enumerate(steps):
        n = i + offset

        def pick(seq):
            return seq[n] if n < len(seq) else math.nan

        rows.append({"iteration": i + 1, "step_norm": s, "error": pick(errors), "J": pick(J),
                     "anomaly": pick(anomaly), "solver_iterations": _solver_iterations(result, i)})
    return rows


def initial_row(result) -> dict:
    def first(seq):
        return seq[0] if seq else None

    if not getattr(result, "J", None):
        return {}
    return {"J": first(result.J), "error": first(result.errors), "anomaly": first(result.anomaly)}


def convergence_log(result, path) -> Path:
    """CSV with columns ``iteration, step_norm, error, J, anomaly, solver_iterations`` (NaN when unknown)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history_rows(result):
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:-1]]
                       + [row["solver_iterations"]])
    init = initial_row(result)
    if init:
        path.with_name(path.name + ".json").write_text(json.dumps({"initial": init}, indent=2, sort_keys=True) + "\n")
    return path


def read_convergence_log(path) -> dict:
    """Columns of a convergence log as lists (counts as ints)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {c: [] for c in LOG_COLUMNS}
    for r in rows:
        out["iteration"].append(int(r["iteration"]))
        out["solver_iterations"].append(int(r["solver_iterations"]))
        for c in LOG_COLUMNS[1:-1]:
            out[c].append(float(r[c]))
    return out
