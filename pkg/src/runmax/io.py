"""File formats: density CSV, JSON reports, flat binary path ensembles."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .mc import PathEnsemble
from .model import DensityField, WedgeGrid

SCHEMA_VERSION = "1"
MAGIC = b"RMXENS01"
_HEADER = struct.Struct("<QQQdd?")  # n_paths, d, seed, dt, T, bridge


class FormatError(ValueError):
    pass


def _num(v: float) -> str:
    # repr is the shortest string that round-trips to the same double
    return repr(float(v))


def write_density_csv(field: DensityField, path, t_indices=None) -> None:
    """Wedge nodes of the requested slices as rows t, m, x1..xd, value."""
    g = field.grid
    t_indices = range(g.times.size) if t_indices is None else t_indices
    m, xs = g.mesh()
    mask = g.mask()
    mm = np.broadcast_to(m, g.slice_shape)[mask]
    cols = [np.broadcast_to(x, g.slice_shape)[mask] for x in xs]
    header = ["t", "m"] + [f"x{k + 1}" for k in range(g.d)] + ["value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in t_indices:
            t = _num(g.times[k])
            vals = field.values[k][mask]
            for i in range(vals.size):
                w.writerow([t, _num(mm[i])] + [_num(c[i]) for c in cols] + [_num(vals[i])])


def read_density_csv(path, grid: WedgeGrid) -> DensityField:
    """Re-load a density CSV onto ``grid`` (node coordinates must match exactly)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["t", "m"] or rows[0][-1] != "value":
        raise FormatError("missing or malformed CSV header")
    d = len(rows[0]) - 3
    if d != grid.d:
        raise FormatError("dimension of the CSV does not match the grid")
    data = np.array(rows[1:], dtype=float).reshape(-1, d + 3)
    values = np.zeros((grid.times.size,) + grid.slice_shape)
    x1 = grid.x1
    ti = np.searchsorted(grid.times, data[:, 0])
    i = np.searchsorted(x1, data[:, 1]) - grid.m_start
    j = np.searchsorted(x1, data[:, 2])
    idx = [ti, i, j]
    ok = (ti < grid.times.size) & (i >= 0) & (i < grid.n_m) & (j < grid.n)
    if d == 2:
        k2 = np.searchsorted(grid.x2, data[:, 3])
        ok &= k2 < grid.x2.size
        idx.append(k2)
    if not np.all(ok):
        raise FormatError("CSV node outside the grid")
    exact = (grid.times[ti] == data[:, 0]) & (x1[grid.m_start + i] == data[:, 1]) & (x1[j] == data[:, 2])
    if d == 2:
        exact &= grid.x2[idx[3]] == data[:, 3]
    if not np.all(exact):
        raise FormatError("CSV coordinates do not coincide with grid nodes")
    values[tuple(idx)] = data[:, -1]
    return DensityField(grid, values, "csv")


def write_json(obj: dict, path) -> None:
    out = {"schema_version": SCHEMA_VERSION}
    out.update(obj)
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_ensemble(ens: PathEnsemble, path) -> None:
    """Magic, header, then one row (M, X^1..X^d) per path, little-endian float64."""
    rows = np.empty((ens.n_paths, ens.d + 1), dtype="<f8")
    rows[:, 0] = ens.m
    rows[:, 1:] = ens.x
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(ens.n_paths, ens.d, ens.seed & (2**64 - 1), ens.dt, ens.T, ens.bridge))
        fh.write(rows.tobytes())


def read_ensemble(path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError("not an ensemble file")
    off = len(MAGIC)
    n, d, seed, dt, T, bridge = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    rows = np.frombuffer(raw, dtype="<f8", offset=off)
    if rows.size != n * (d + 1):
        raise FormatError("truncated ensemble file")
    rows = rows.reshape(n, d + 1).astype(float)
    return PathEnsemble(rows[:, 0].copy(), rows[:, 1:].copy(), int(n), dt, T, int(seed), bool(bridge), int(d))


def write_ensemble_csv(ens: PathEnsemble, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M"] + [f"X{k + 1}" for k in range(ens.d)])
        for i in range(ens.n_paths):
            w.writerow([_num(ens.m[i])] + [_num(v) for v in ens.x[i]])
