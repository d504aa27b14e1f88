"""Ensemble and report serialisation.

Binary ensemble layout (all little-endian)::

    magic      8 bytes   b"FBLENS01"
    n_paths    u32
    n_steps    u32       K (the file holds K + 1 samples per path)
    dim        u32
    dt         f64
    charts     u32[n_paths * (K + 1)]        row-major (path, step)
    coords     f64[n_paths * (K + 1) * dim]  row-major (path, step, coordinate)

The CSV form has one row per (path, step) with columns
``path_id, step, chart_id, x0 .. x{dim-1}``.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from fiberlab.geometry import ChartedManifold
from fiberlab.stochastic import PathEnsemble, TimeGrid

MAGIC = b"FBLENS01"
_HEADER = struct.Struct("<8sIIId")


def write_ensemble_csv(ens: PathEnsemble, path, max_paths: int | None = None) -> Path:
    path = Path(path)
    N = ens.N if max_paths is None else min(ens.N, max_paths)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "chart_id"] + [f"x{i}" for i in range(ens.dim)])
        for i in range(N):
            for k in range(ens.grid.K + 1):
                w.writerow([i, k, int(ens.charts[i, k])] + [repr(float(v)) for v in ens.X[i, k]])
    return path


def read_ensemble_csv(path, manifold: ChartedManifold, dt: float) -> PathEnsemble:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    pid, step = rows[:, 0].astype(int), rows[:, 1].astype(int)
    N, K1 = pid.max() + 1, step.max() + 1
    if rows.shape[0] != N * K1:
        raise ValueError("CSV does not hold a full (path, step) table")
    order = np.lexsort((step, pid))
    rows = rows[order]
    charts = rows[:, 2].astype(np.int64).reshape(N, K1)
    X = rows[:, 3:].reshape(N, K1, -1)
    return PathEnsemble(manifold, TimeGrid((K1 - 1) * dt, dt), charts, X)


def write_ensemble_binary(ens: PathEnsemble, path) -> Path:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, ens.N, ens.grid.K, ens.dim, float(ens.grid.dt)))
        fh.write(ens.charts.astype("<u4").tobytes())
        fh.write(ens.X.astype("<f8").tobytes())
    return path


def read_ensemble_binary(path, manifold: ChartedManifold) -> PathEnsemble:
    raw = Path(path).read_bytes()
    magic, N, K, dim, dt = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a fiberlab ensemble file")
    off = _HEADER.size
    n_ids = N * (K + 1)
    charts = np.frombuffer(raw, "<u4", n_ids, off).astype(np.int64).reshape(N, K + 1)
    off += 4 * n_ids
    X = np.frombuffer(raw, "<f8", n_ids * dim, off).reshape(N, K + 1, dim)
    if manifold.dim != dim:
        raise ValueError(f"file has dimension {dim}, manifold has {manifold.dim}")
    return PathEnsemble(manifold, TimeGrid(K * dt, dt), charts, X.copy())


def write_bins_csv(reports, path) -> Path:
    """One row per (report, bin): plot-ready drift statistics."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["process", "bin", "t_start", "t_end", "mean", "se", "pass"])
        for r in reports:
            for b, (m, s, ok) in enumerate(zip(r.bin_means, r.bin_ses, r.bin_pass)):
                w.writerow([r.name, b, repr(r.bin_edges[b]), repr(r.bin_edges[b + 1]), repr(m), repr(s), int(ok)])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def dumps_report(report: dict) -> str:
    """Canonical JSON (sorted keys, fixed separators) so reruns compare byte for byte."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"
