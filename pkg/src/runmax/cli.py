"""Batch front end: ``runmax {density,simulate,check,hitting,slope} --config run.json``.

Exit codes: 0 success, 1 failed checks, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from scipy import fft

from . import analysis, exprlang, io, mc
from .lamperti import LampertiError, solve_lamperti
from .model import DiffusionModel, GridSpec, ModelError, build_grid, validate_model
from .series import SeriesError, solve_series, solve_volterra

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

_EXPR = {"type": "string", "minLength": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d", "drift"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "drift": {"type": "array", "items": _EXPR, "minItems": 1},
                "diffusion": {"oneOf": [{"const": "identity"}, _EXPR]},
                "x0": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}, "minItems": 1},
                "weights": {"type": "array", "items": _POS},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _POS,
                "dx": _POS,
                "dx2": _POS,
                "n_time": {"type": "integer", "minimum": 2},
                "time_spacing": {"enum": ["sqrt", "uniform"]},
                "eps_trunc": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.1},
            },
        },
        "series": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["series", "volterra"]},
                "n_terms": {"type": "integer", "minimum": 1},
                "n_theta": {"type": "integer", "minimum": 4},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer"},
                "dt": _POS,
                "seed": {"type": "integer", "minimum": 0},
                "bridge": {"type": "boolean"},
                "write_csv": {"type": "boolean"},
            },
        },
        "levels": {"type": "array", "items": {"type": "number"}},
        "hitting": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"times": {"type": "array", "items": _POS}},
        },
        "slope": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "psi": _EXPR,
                "t": _POS,
                "h_list": {"type": "array", "items": _POS, "minItems": 1},
            },
        },
        "check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "run": {"type": "array", "items": {"enum": ["mass", "interior", "boundary", "hitting",
                                                             "weak", "slope"]}},
                "mass_tol": {"type": "number", "minimum": 0},
                "interior_tol": {"type": "number", "minimum": 0},
                "boundary_tol": {"type": "number", "minimum": 0},
                "hitting_tol": {"type": "number", "minimum": 0},
                "slope_tol": {"type": "number", "minimum": 0},
                "quad_tol": {"type": "number", "minimum": 0},
                "weak_F": _EXPR,
            },
        },
        "threads": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "grid": {"T": 1.0, "dx": 0.05, "n_time": 20, "time_spacing": "sqrt", "eps_trunc": 1e-6},
    "series": {"method": "series", "n_terms": 4, "n_theta": 24},
    "mc": {"n_paths": 200_000, "dt": 1e-3, "seed": 0, "bridge": True, "write_csv": True},
    "levels": [1.0],
    "hitting": {},
    "slope": {"psi": "1", "h_list": [0.1, 0.01, 0.001]},
    "check": {"run": ["mass", "interior", "boundary", "hitting", "weak", "slope"],
              "mass_tol": 2e-3, "interior_tol": 5e-3, "boundary_tol": 5e-3, "hitting_tol": 2e-3,
              "slope_tol": 5e-3, "quad_tol": 1e-3, "weak_F": "exp(-(m-1)^2-x1^2)"},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for key, val in raw.items():
        if isinstance(val, dict) and key in cfg:
            cfg[key].update(val)
        else:
            cfg[key] = val
    cfg.setdefault("threads", os.cpu_count() or 1)
    return cfg


def build_model(cfg: dict) -> DiffusionModel:
    mb = cfg["model"]
    d = mb["d"]
    if d > 2:
        raise ModelError("dimension > 2 unsupported")
    if len(mb["drift"]) != d:
        raise ConfigError(f"model.drift needs {d} entries")
    x0 = np.asarray(mb.get("x0", [[0.0] * d]), dtype=float)
    if x0.ndim != 2 or x0.shape[1] != d:
        raise ConfigError("model.x0 must be a list of points of length d")
    diff = mb.get("diffusion", "identity")
    try:
        drift = [exprlang.parse(s) for s in mb["drift"]]
        a = None if diff == "identity" else exprlang.parse(diff)
    except exprlang.ExprError as exc:
        raise ConfigError(f"model expression: {exc}") from exc
    if a is not None and a.is_constant and a.eval([]) == 1.0:
        a = None
    kind = "identity" if a is None else "scalar"
    w = mb.get("weights")
    w = np.full(x0.shape[0], 1.0 / x0.shape[0]) if w is None else np.asarray(w, dtype=float)
    return DiffusionModel(d, tuple(drift), x0, w, kind, a)


def _spec(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(dx=g["dx"], n_time=g["n_time"], dx2=g.get("dx2"), time_spacing=g["time_spacing"])


def compute_density(cfg: dict, model: DiffusionModel):
    """Density field on the wedge plus a report dict (per-term norms and bounds)."""
    g = cfg["grid"]
    s = cfg["series"]
    T, eps = g["T"], g["eps_trunc"]
    if not model.is_identity:
        field, sol, lmap = solve_lamperti(model, _spec(cfg), T, eps, s["n_terms"], s["method"],
                                          n_theta=s["n_theta"])
        report = sol.report() if s["method"] == "series" else {}
        report.update({"route": "lamperti", "coordinates": "X"})
        return field, report, sol
    box = [(float(model.initial_points[:, k].min()) - 20.0, float(model.initial_points[:, k].max()) + 20.0)
           for k in range(model.d)]
    model = model.with_certificate(validate_model(model, box))
    grid = build_grid(_spec(cfg), model, T, eps)
    from .series import OperatorEngine
    engine = OperatorEngine(model, grid, n_theta=s["n_theta"])
    if s["method"] == "series":
        sol = solve_series(model, grid, s["n_terms"], engine)
        return sol.partial_sum, sol.report(), sol
    field = solve_volterra(model, grid, engine)
    return field, {"method": "volterra"}, None


def _write_density(cfg, model, out: Path) -> dict:
    field, report, _ = compute_density(cfg, model)
    io.write_density_csv(field, out / "density.csv")
    report = dict(report)
    report["mass"] = [field.mass(k) for k in range(field.grid.times.size)]
    report["times"] = field.grid.times
    io.write_json(report, out / "norms.json")
    return report


def cmd_density(cfg, model, out: Path) -> int:
    _write_density(cfg, model, out)
    return EXIT_OK


def _simulate(cfg, model, T=None):
    m = cfg["mc"]
    if m["n_paths"] < 1:
        raise ConfigError("mc.n_paths must be >= 1")
    T = cfg["grid"]["T"] if T is None else T
    return mc.simulate(model, T, m["n_paths"], min(m["dt"], T / 10), m["seed"], m["bridge"],
                       threads=cfg["threads"])


def cmd_simulate(cfg, model, out: Path) -> int:
    ens = _simulate(cfg, model)
    io.write_ensemble(ens, out / "samples.bin")
    if cfg["mc"]["write_csv"]:
        io.write_ensemble_csv(ens, out / "samples.csv")
    mean_m, se_m = mc.estimate_expectation(ens, lambda m, xs: m)
    probs = []
    for a in cfg["levels"]:
        p, se = mc.estimate_expectation(ens, lambda m, xs, a=a: (m >= a).astype(float))
        probs.append({"level": a, "p": p, "se": se})
    io.write_json({"T": ens.T, "n_paths": ens.n_paths, "dt": ens.dt, "seed": ens.seed, "bridge": ens.bridge,
                   "mean_max": mean_m, "mean_max_se": se_m, "hit_probability": probs}, out / "summary.json")
    return EXIT_OK


def _hitting_rows(cfg, field):
    g = field.grid
    times = cfg["hitting"].get("times") or [float(t) for t in g.times[1:]]
    rows = []
    for a in cfg["levels"]:
        dens = [{"t": t, "density": analysis.hitting_density(field, a, t)} for t in times]
        rows.append({"level": a, "density": dens, "probability": analysis.hitting_probability(field, a, g.T)})
    return rows


def cmd_hitting(cfg, model, out: Path) -> int:
    field, _, _ = compute_density(cfg, model)
    io.write_json({"T": field.grid.T, "levels": _hitting_rows(cfg, field)}, out / "hitting.json")
    return EXIT_OK


def cmd_slope(cfg, model, out: Path) -> int:
    sl = cfg["slope"]
    t = sl.get("t", cfg["grid"]["T"])
    c = dict(cfg)
    c["grid"] = dict(cfg["grid"], T=t)
    field, _, _ = compute_density(c, model)
    m = cfg["mc"]
    res = analysis.local_slope(model, t, sl["h_list"], field, exprlang.parse(sl["psi"]), m["n_paths"],
                               min(m["dt"], t / 10), m["seed"], cfg["threads"])
    io.write_json({k: v for k, v in res.items() if k != "schema_version"}, out / "slope.json")
    return EXIT_OK


def run_checks(cfg, model) -> dict:
    ck = cfg["check"]
    T = cfg["grid"]["T"]
    field, report, sol = compute_density(cfg, model)
    kT = field.grid.times.size - 1
    trunc = float(report.get("truncation_bound", [0.0])[-1]) if "truncation_bound" in report else 0.0
    checks = {}

    def record(name, passed, **numbers):
        checks[name] = {"passed": bool(passed), **numbers}

    run = ck["run"]
    if "mass" in run:
        mass = field.mass(kT)
        record("mass", abs(mass - 1.0) <= ck["mass_tol"] + trunc, mass=mass, tolerance=ck["mass_tol"] + trunc)
    if "interior" in run:
        r = analysis.fp_interior_residual(field, kT, model)
        record("interior", r.l1 <= ck["interior_tol"], l1=r.l1, linf=r.linf, tolerance=ck["interior_tol"])
    if "boundary" in run:
        r = analysis.boundary_residual(field, kT, model)
        record("boundary", r.l1 <= ck["boundary_tol"], l1=r.l1, linf=r.linf, tolerance=ck["boundary_tol"])
    ens = None
    if "hitting" in run or "slope" in run:
        ens = _simulate(cfg, model)
    if "hitting" in run:
        rows = []
        ok = True
        for a in cfg["levels"]:
            p = analysis.hitting_probability(field, a, T)
            pm, se = mc.estimate_expectation(ens, lambda m, xs, a=a: (m >= a).astype(float))
            tol = 3 * se + ck["hitting_tol"]
            ok &= abs(p - pm) <= tol
            rows.append({"level": a, "density_route": p, "mc": pm, "mc_se": se, "tolerance": tol})
        record("hitting", ok, levels=rows)
    if "weak" in run:
        if model.d == 1 and model.is_identity:
            m = cfg["mc"]
            res = mc.weak_identity_gap(model, ck["weak_F"], T, sol if sol is not None else field, m["n_paths"],
                                       min(m["dt"], T / 10), m["seed"], cfg["threads"], ck["quad_tol"])
            record("weak", res.pop("passed"), **res)
        else:
            checks["weak"] = {"passed": True, "skipped": "implemented for d = 1 with identity diffusion"}
    if "slope" in run:
        hs = cfg["slope"]["h_list"]
        res = analysis.local_slope(model, T, hs, field, exprlang.parse(cfg["slope"]["psi"]), ensemble=ens)
        last = min(res["rows"], key=lambda r: r["h"])
        tol = 3 * last["se"] + ck["slope_tol"]
        record("slope", abs(last["error"]) <= tol, target=res["target"], rows=res["rows"], tolerance=tol)
    return {"T": T, "all_passed": all(c["passed"] for c in checks.values()), "checks": checks}


def cmd_check(cfg, model, out: Path) -> int:
    rep = run_checks(cfg, model)
    io.write_json(rep, out / "check.json")
    failed = [k for k, v in rep["checks"].items() if not v["passed"]]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"density": cmd_density, "simulate": cmd_simulate, "check": cmd_check,
            "hitting": cmd_hitting, "slope": cmd_slope}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="runmax", description="Joint density of a diffusion and its running maximum.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: config or all cores)")
    ap.add_argument("--seed-override", type=int, default=None, help="replace mc.seed")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg["threads"] = args.threads
        if args.seed_override is not None:
            if not 0 <= args.seed_override < 2**64:
                raise ConfigError("--seed-override must be an unsigned 64-bit integer")
            cfg["mc"]["seed"] = args.seed_override
        model = build_model(cfg)
        if not model.is_identity:
            validate_model(model, [(-20.0, 20.0)])  # ellipticity and growth caps
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, ModelError, exprlang.ExprError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with fft.set_workers(cfg["threads"]):
            return COMMANDS[args.command](cfg, model, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, SeriesError, LampertiError, analysis.AnalysisError, mc.SimulationError,
            ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
