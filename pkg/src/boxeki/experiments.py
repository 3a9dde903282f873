"""Config-driven experiments: build a problem, run several flows, write diagnostics.

A config is a JSON document with five sections::

    problem      kind ("linear_elliptic" | "darcy"), truth, box, noise, observations
    method       names, ensemble_size, seed
    flow         shared flow parameters (iota, ramp_width, schedule, alpha, R, eps, ...)
    integration  t_end, rel_tol, abs_tol, checkpoints, max_step
    output       dir, jobs

Missing keys are filled from DEFAULTS; unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from boxeki.constraints import BoxConstraint, DomainError, project
from boxeki.diagnostics import compute_record, estimate_rate, records_to_csv
from boxeki.dynamics import FlowSpec, make_flow
from boxeki.ensemble import Ensemble, NoiseModel
from boxeki.forward import (
    DarcyForward,
    DarcyProblem2D,
    ForwardSolveError,
    assemble_elliptic_1d,
    uniform_obs_grid,
    uniform_obs_points,
)
from boxeki.integrator import IntegrationConfig, StepSizeUnderflow, integrate
from boxeki.oracle import ConvergenceError, solve_box_ls, solve_box_nls
from boxeki.priors import (
    build_kl_prior,
    fourier_initial_ensemble,
    kl_sample,
    parameter_nodes,
    pushback_interior,
)

log = logging.getLogger(__name__)

DEFAULTS = {
    "problem": {
        "kind": "linear_elliptic",
        "n_params": 16,
        "observations": "full",
        "mesh_size": 2.0**-8,
        "noise_std": 0.01,
        "truth": {"kind": "sine", "terms": [[3, 1.0], [1, 0.75]], "scale": 0.5},
        "box": {"lower": -0.5, "upper": 0.5},
        # darcy only
        "n_cells": 16,
        "kl_modes": 64,
        "sigma2": 1.0,
        "nu": 2.0,
        "obs_per_side": 4,
    },
    "method": {"names": ["eki", "projected", "transformed"], "ensemble_size": 5, "seed": 1},
    "flow": {
        "family": "eki",
        "iota": 1e3,
        "ramp_width": 1e-3,
        "schedule": "decaying",
        "eps": 1.0,
        "alpha": 0.75,
        "R": 1.0,
        "active_set": "mean",
    },
    "integration": {
        "t_end": 1e6,
        "rel_tol": 1e-6,
        "abs_tol": 1e-9,
        "checkpoints": 25,
        "max_step": math.inf,
    },
    "output": {"dir": "runs", "jobs": 1},
}

# method name -> FlowSpec overrides on top of the "flow" section
METHODS = {
    "eki": {"constraint_mode": "none"},
    "esrf": {"constraint_mode": "none", "family": "esrf"},
    "projected": {"constraint_mode": "projected"},
    "projected_esrf": {"constraint_mode": "projected", "family": "esrf"},
    "transformed": {"constraint_mode": "transformed"},
    "transformed_esrf": {"constraint_mode": "transformed", "family": "esrf"},
    "smoothed_projected": {"constraint_mode": "barrier_smoothed"},
    "smoothed_transformed": {"constraint_mode": "transformed_smoothed"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


class SolverFailure(RuntimeError):
    """At least one method failed; partial outputs were written."""

    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary


# ---------------------------------------------------------------------------
# configuration


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(defaults[key], dict) and key != "truth":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


def _positive(cfg, section, key, integer=False):
    v = cfg[section][key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
    if integer:
        ok = ok and float(v).is_integer()
    if not ok:
        kind = "a positive integer" if integer else "a positive number"
        raise ConfigError(f"{section}.{key}: must be {kind}, got {v!r}")


def resolve_config(raw: dict, seed=None, out_dir=None, methods=None, t_end=None) -> dict:
    """Merge with defaults, apply command-line overrides and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["method"]["seed"] = int(seed)
    if out_dir is not None:
        cfg["output"]["dir"] = str(out_dir)
    if methods is not None:
        cfg["method"]["names"] = list(methods)
    if t_end is not None:
        cfg["integration"]["t_end"] = float(t_end)

    prob = cfg["problem"]
    if prob["kind"] not in ("linear_elliptic", "darcy"):
        raise ConfigError(f"problem.kind: must be 'linear_elliptic' or 'darcy', got {prob['kind']!r}")
    for key in ("noise_std",):
        _positive(cfg, "problem", key)
    for key in ("n_params", "n_cells", "kl_modes", "obs_per_side"):
        _positive(cfg, "problem", key, integer=True)
    obs = prob["observations"]
    if obs != "full" and not (isinstance(obs, int) and obs > 0):
        raise ConfigError(f"problem.observations: must be 'full' or a positive integer, got {obs!r}")
    _build_box(prob, _param_dim(prob))

    names = cfg["method"]["names"]
    if not isinstance(names, list) or not names:
        raise ConfigError("method.names: must be a non-empty list")
    for name in names:
        if name not in METHODS:
            raise ConfigError(f"method.names: unknown method {name!r} (known: {', '.join(METHODS)})")
    if len(set(names)) != len(names):
        raise ConfigError("method.names: duplicate method")
    _positive(cfg, "method", "ensemble_size", integer=True)
    if cfg["method"]["ensemble_size"] < 2:
        raise ConfigError("method.ensemble_size: need at least 2 particles")
    if not isinstance(cfg["method"]["seed"], int):
        raise ConfigError("method.seed: must be an integer")

    for name in names:
        try:
            _flow_spec(cfg, name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"flow: {exc}") from None

    for key in ("t_end", "rel_tol", "abs_tol", "max_step"):
        _positive(cfg, "integration", key)
    _positive(cfg, "integration", "checkpoints", integer=True)
    if cfg["integration"]["checkpoints"] < 2:
        raise ConfigError("integration.checkpoints: must be at least 2")
    _positive(cfg, "output", "jobs", integer=True)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None


def _flow_spec(cfg, method) -> FlowSpec:
    params = dict(cfg["flow"])
    params.update(METHODS[method])
    return FlowSpec(**params)


# ---------------------------------------------------------------------------
# problem construction


def _param_dim(prob):
    return prob["n_params"] if prob["kind"] == "linear_elliptic" else prob["kl_modes"]


def _build_box(prob, n) -> BoxConstraint:
    b = prob["box"]
    if not isinstance(b, dict) or set(b) - {"lower", "upper"}:
        raise ConfigError("problem.box: expected an object with 'lower' and 'upper'")
    lower = np.broadcast_to(np.asarray(b.get("lower"), float), (n,))
    upper = np.broadcast_to(np.asarray(b.get("upper"), float), (n,))
    try:
        return BoxConstraint(lower, upper)
    except ValueError as exc:
        raise ConfigError(f"problem.box: {exc}") from None


@dataclass
class Problem:
    fwd: object
    y: np.ndarray
    noise: NoiseModel
    box: BoxConstraint
    truth: np.ndarray
    e0: Ensemble
    u_star: np.ndarray
    oracle: object = None
    info: dict = field(default_factory=dict)


def _sine_truth(spec, x):
    terms = spec.get("terms", [[3, 1.0], [1, 0.75]])
    scale = spec.get("scale", 1.0)
    return scale * sum(c * np.sin(k * x) for k, c in terms)


def build_problem(cfg) -> Problem:
    prob = cfg["problem"]
    J = cfg["method"]["ensemble_size"]
    seed = cfg["method"]["seed"]
    if prob["kind"] == "linear_elliptic":
        n = prob["n_params"]
        pts = None if prob["observations"] == "full" else uniform_obs_points(prob["observations"])
        fwd = assemble_elliptic_1d(n_params=n, obs_points=pts, mesh_size=prob["mesh_size"])
        box = _build_box(prob, n)
        truth_spec = prob["truth"]
        if truth_spec.get("kind", "sine") == "sine":
            truth = _sine_truth(truth_spec, parameter_nodes(n))
        elif truth_spec["kind"] == "values":
            truth = np.asarray(truth_spec["values"], float)
        else:
            raise ConfigError(f"problem.truth.kind: unknown truth {truth_spec['kind']!r}")
        if truth.shape != (n,):
            raise ConfigError(f"problem.truth: expected {n} values, got {truth.size}")
        y = fwd(truth)
        noise = NoiseModel.isotropic(prob["noise_std"], y.size)
        e0 = fourier_initial_ensemble(n, J, seed=seed, box=box)
        kkt = solve_box_ls(fwd.matrix, y, noise, box)
        return Problem(fwd, y, noise, box, truth, e0, kkt.u_star, kkt)

    # darcy: parameters are whitened KL coefficients
    n = prob["kl_modes"]
    prior = build_kl_prior(n_cells=prob["n_cells"], sigma2=prob["sigma2"], nu=prob["nu"], truncation=n)
    darcy = DarcyProblem2D(prob["n_cells"], prior, uniform_obs_grid(prob["obs_per_side"]))
    fwd = DarcyForward(darcy)
    box = _build_box(prob, n)
    truth_spec = prob["truth"]
    if truth_spec.get("kind") == "kl_draw":
        xi = kl_sample(prior, 1, seed=truth_spec.get("seed", 0), whitened=True).particles[0]
        truth = truth_spec.get("scale", 1.0) * xi
    elif truth_spec.get("kind") == "values":
        truth = np.asarray(truth_spec["values"], float)
    else:
        raise ConfigError("problem.truth.kind: darcy needs 'kl_draw' or 'values'")
    if truth.shape != (n,):
        raise ConfigError(f"problem.truth: expected {n} values, got {truth.size}")
    y = fwd(truth)
    noise = NoiseModel.isotropic(prob["noise_std"], y.size)
    draws = kl_sample(prior, J, seed=seed, whitened=True).particles
    e0 = Ensemble(pushback_interior(project(draws, box), box))
    kkt = solve_box_nls(fwd, y, noise, box, x0=project(truth, box))
    return Problem(fwd, y, noise, box, truth, e0, kkt.u_star, kkt)


# ---------------------------------------------------------------------------
# running


def _rates(records):
    out = {}
    for metric in ("spread", "kkt_residual", "cost_gap"):
        try:
            out[metric] = estimate_rate(records, metric)
        except ValueError:
            out[metric] = None
    return out


def run_method(cfg, method, problem: Problem | None = None, out_dir=None) -> dict:
    """Integrate one method, write <out>/<method>.csv, return its summary entry."""
    problem = build_problem(cfg) if problem is None else problem
    spec = _flow_spec(cfg, method)
    icfg = cfg["integration"]
    flow = make_flow(spec, problem.fwd, problem.y, problem.noise, problem.box)
    records, violations = [], []

    def on_checkpoint(t, e):
        records.append(compute_record(e, problem.truth, problem.u_star, problem.fwd, problem.y, problem.noise, t))
        U = e.particles
        violations.append(float(np.max(problem.box.constraint_values(U))))

    integ = IntegrationConfig(
        t_end=float(icfg["t_end"]),
        rel_tol=icfg["rel_tol"],
        abs_tol=icfg["abs_tol"],
        max_step=icfg["max_step"],
        checkpoints=int(icfg["checkpoints"]),
    )
    wall = time.perf_counter()
    status, message, stats, final = "ok", None, None, None
    try:
        traj = integrate(flow.rhs, problem.e0, integ, domain=flow.domain, callback=on_checkpoint)
        stats, final = traj.stats, traj.final.particles
    except (StepSizeUnderflow, DomainError, ForwardSolveError, np.linalg.LinAlgError, FloatingPointError) as exc:
        status, message = "failed", f"{type(exc).__name__}: {exc}"
        log.error("method %s failed: %s", method, message)
    wall = time.perf_counter() - wall

    if out_dir is not None:
        records_to_csv(records, Path(out_dir) / f"{method}.csv")
    entry = {
        "method": method,
        "status": status,
        "partial": status != "ok",
        "message": message,
        "checkpoints_written": len(records),
        "terminal": records[-1].as_dict() if records else None,
        "slopes": _rates(records) if status == "ok" else None,
        "max_box_violation": max(violations) if violations else None,
        "feasible_at_all_checkpoints": bool(violations) and max(violations) <= 0.0,
        "terminal_mean": None if final is None else final.mean(axis=0).tolist(),
        "stats": stats,
        "wall_seconds": round(wall, 3),
    }
    return entry


def _job(args):
    cfg, method, out_dir = args
    return run_method(cfg, method, out_dir=out_dir)


def compare_methods(cfg, results: dict) -> dict:
    """Side-by-side terminal metrics plus the transformed-vs-projected flag."""
    rows = []
    for name in cfg["method"]["names"]:
        r = results[name]
        term = r["terminal"] or {}
        rows.append({"method": name, "status": r["status"], **{k: v for k, v in term.items()}})
    flag = None
    t, p = results.get("transformed"), results.get("projected")
    if t and p and t["terminal"] and p["terminal"] and t["status"] == p["status"] == "ok":
        flag = t["terminal"]["cost_gap"] < p["terminal"]["cost_gap"]
    return {"rows": rows, "transformed_cost_gap_below_projected": flag}


def format_table(table) -> str:
    cols = ("method", "status", "t", "spread", "kkt_residual", "cost_gap")
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for row in table["rows"]:
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append(f"{v:>14.4e}" if isinstance(v, float) else f"{str(v):>14}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def run_experiment(cfg: dict, echo=print) -> dict:
    """Run every configured method; writes CSVs and summary.json.

    Raises SolverFailure (after writing partial outputs) if any method fails.
    """
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    if echo is not None:
        echo(json.dumps(cfg, indent=2, default=str))
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, default=str)

    problem = build_problem(cfg)
    names = cfg["method"]["names"]
    jobs = min(int(cfg["output"]["jobs"]), len(names))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_job, [(cfg, m, out) for m in names]))
        results = dict(zip(names, entries))
    else:
        results = {m: run_method(cfg, m, problem, out) for m in names}

    oracle = problem.oracle
    summary = {
        "problem": cfg["problem"]["kind"],
        "seed": cfg["method"]["seed"],
        "t_end": cfg["integration"]["t_end"],
        "kkt_oracle": {
            "u_star": np.asarray(problem.u_star).tolist(),
            "multipliers": None if oracle is None else np.asarray(oracle.multipliers).tolist(),
            "stationarity_residual": None if oracle is None else oracle.stationarity_residual,
        },
        "truth": problem.truth.tolist(),
        "methods": results,
        "comparison": compare_methods(cfg, results),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    failed = [m for m, r in results.items() if r["status"] != "ok"]
    if failed:
        raise SolverFailure(f"methods failed: {', '.join(failed)}", summary)
    return summary


__all__ = [
    "DEFAULTS",
    "METHODS",
    "ConfigError",
    "SolverFailure",
    "ConvergenceError",
    "Problem",
    "build_problem",
    "compare_methods",
    "format_table",
    "load_config",
    "resolve_config",
    "run_experiment",
    "run_method",
]
