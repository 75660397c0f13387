"""Experiment runner: dispatch a validated config to the solvers and write
reproducible reports.

The report body (task, config hash, flags, headline numbers, per-criterion
pass/fail, artifact list) is hashed; timestamps and environment live outside
the hashed body so identical config and seed reproduce identical hashes.
Exit codes: 0 success, 2 criterion failure, 1 error.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import forward, normcheck, obstacle as obstacle_mod, oracle as oracle_mod
from .bsde import LocalAffineBasis, PolynomialBasis, evaluate_u, solve_bsde
from .config import ExperimentConfig, validate_config
from .errors import ConfigError, GridMismatchError, SolverError
from .forward import TimeGrid, simulate_paths

__all__ = ["Report", "run_experiment", "run_config_file", "compare_report", "CompareTable"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CRITERION = 2


@dataclass
class Report:
    """Machine-readable experiment summary."""

    body: dict
    meta: dict

    @property
    def hash(self):
        return hashlib.sha256(
            json.dumps(self.body, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()

    @property
    def passed(self):
        return all(c["passed"] for c in self.body.get("criteria", []))

    def to_json(self):
        return json.dumps({"body": self.body, "hash": self.hash, "meta": self.meta},
                          indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")


def _py(x):
    """Convert numpy scalars/arrays to plain JSON-serializable Python."""
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_py(v) for v in x]
    if isinstance(x, dict):
        return {k: _py(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_py(v) for v in x]
    return x


@dataclass
class CompareTable:
    """Pointwise solver-vs-oracle comparison on a shared x-grid."""

    x: np.ndarray
    solver: np.ndarray
    oracle: np.ndarray
    rel_err: np.ndarray
    sup_rel: float
    l2_weighted: float
    tol_rel: float

    @property
    def passed(self):
        return bool(self.sup_rel <= self.tol_rel)

    def rows(self):
        for i in range(self.x.size):
            yield (self.x[i], self.solver[i], self.oracle[i], self.rel_err[i])


def compare_report(solver_csv, oracle_csv, tol_rel, region=None, weight=None):
    """Compare two (x, u) CSV tables on their shared grid.

    Both files must carry the same x-grid on the comparison region (interior;
    points outside ``region`` are dropped first).  Returns per-point relative
    errors with sup and weighted-L2 summaries; passes iff the sup over the
    region is within ``tol_rel``.
    """
    xs, us = _read_xu_csv(solver_csv)
    xo, uo = _read_xu_csv(oracle_csv)
    if region is not None:
        lo, hi = region
        ms = (xs >= lo - 1e-12) & (xs <= hi + 1e-12)
        mo = (xo >= lo - 1e-12) & (xo <= hi + 1e-12)
        xs, us = xs[ms], us[ms]
        xo, uo = xo[mo], uo[mo]
    if xs.size != xo.size or xs.size == 0:
        raise GridMismatchError(
            f"x-grids differ on the region: {xs.size} vs {xo.size} points")
    if not np.allclose(xs, xo, rtol=0, atol=1e-9 * (1 + np.abs(xs).max())):
        raise GridMismatchError("x-grids differ on the region")
    scale = np.maximum(np.abs(uo), 1e-12 * max(1.0, float(np.abs(uo).max())))
    rel = np.abs(us - uo) / scale
    w = weight(xs[:, None]) if weight is not None else np.ones_like(xs)
    l2 = float(math.sqrt(np.sum(w * (us - uo) ** 2) / max(np.sum(w * uo**2), 1e-300)))
    return CompareTable(x=xs, solver=us, oracle=uo, rel_err=rel,
                        sup_rel=float(rel.max()), l2_weighted=l2, tol_rel=tol_rel)


def _read_xu_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    if names is None or "x" not in names or "u" not in names:
        raise GridMismatchError(f"{path}: expected columns x,u")
    x = np.atleast_1d(np.asarray(data["x"], float))
    u = np.atleast_1d(np.asarray(data["u"], float))
    order = np.argsort(x)
    return x[order], u[order]


def _write_xu_csv(path, x, u):
    with open(path, "w") as fh:
        fh.write("x,u\n")
        for xi, ui in zip(x, u):
            fh.write(f"{xi:.17g},{ui:.17g}\n")


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def _build_grid(cfg):
    return TimeGrid(0.0, 1.0, cfg.numerics["grid_n"])


def _starts(cfg, rng):
    num = cfg.numerics
    x0 = num["x0"]
    spread = num["x0_spread"]
    if spread > 0:
        return rng.uniform(x0 - spread, x0 + spread, size=(num["paths"], 1))
    return np.array([x0])


def _basis_from(cfg, paths):
    bb = cfg.numerics["basis"]
    if bb["box"] is not None:
        lo, hi = bb["box"]
    else:
        lo = float(paths.states.min()) - 1e-6
        hi = float(paths.states.max()) + 1e-6
    if bb["kind"] == "poly":
        return PolynomialBasis(bb["degree"], (lo, hi))
    return LocalAffineBasis(bb["cells"], (lo, hi))


def _simulate(cfg, model, driver=None):
    grid = _build_grid(cfg)
    rng = np.random.default_rng(cfg.seed)
    x0 = _starts(cfg, rng)
    functionals = driver.functionals if driver is not None else ()
    return simulate_paths(model, grid, x0, cfg.numerics["paths"], cfg.seed,
                          functionals=functionals)


def _solution_csv(path, sol, eval_x):
    q = sol.vbar.shape[2]
    with open(path, "w") as fh:
        head = "step,time,x,u,z" + "".join(f",vbar_{i+1}" for i in range(q))
        fh.write(head + "\n")
        pts = eval_x[:, None]
        for k in range(sol.n_steps + 1):
            u = evaluate_u(sol, k, pts)
            if k < sol.n_steps:
                z = np.column_stack([sol.basis.predict(sol.coef_z[k, j], pts)
                                     for j in range(sol.states.shape[2])])[:, 0]
                vb = [sol.basis.predict(sol.coef_v[k, i], pts) for i in range(q)]
            else:
                z = np.zeros(eval_x.size)
                vb = [np.zeros(eval_x.size) for _ in range(q)]
            t = sol.grid.nodes[k]
            for j, xj in enumerate(eval_x):
                extras = "".join(f",{vb[i][j]:.17g}" for i in range(q))
                fh.write(f"{k},{t:.17g},{xj:.17g},{u[j]:.17g},{z[j]:.17g}{extras}\n")


def _eval_grid(cfg, paths):
    n_pts = cfg.numerics.get("eval_points", 101)
    lo = float(np.quantile(paths.states, 0.005))
    hi = float(np.quantile(paths.states, 0.995))
    return np.linspace(lo, hi, n_pts)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

def _task_simulate(cfg, out_dir):
    model = cfg.build_model()
    paths = _simulate(cfg, model)
    term = paths.states[-1][:, 0]
    headline = {
        "terminal_mean": float(term.mean()),
        "terminal_var": float(term.var()),
        "mean_jumps_per_path": float(paths.total_jumps_per_path().mean()),
    }
    artifacts = []
    dump = cfg.numerics["dump_paths"]
    if dump == "csv":
        forward.dump_paths_csv(paths, os.path.join(out_dir, "paths.csv"))
        artifacts.append("paths.csv")
    elif dump == "binary":
        forward.dump_paths_binary(paths, os.path.join(out_dir, "paths.bin"))
        artifacts.append("paths.bin")
    return headline, [], artifacts


def _task_solve(cfg, out_dir):
    model = cfg.build_model()
    driver = cfg.build_driver()
    terminal = cfg.build_terminal()
    paths = _simulate(cfg, model, driver)
    basis = _basis_from(cfg, paths)
    sol = solve_bsde(model, driver, terminal, paths, basis,
                     picard_iters=cfg.numerics["picard"])
    eval_x = _eval_grid(cfg, paths)
    _solution_csv(os.path.join(out_dir, "solution.csv"), sol, eval_x)
    diags = {
        "residual_norms": _py(sol.diagnostics["resid"]),
        "condition_numbers": _py(sol.diagnostics["cond"]),
        "clamp_counts": _py(sol.diagnostics["clamped"]),
        "degenerate_steps": _py(sol.diagnostics["degenerate"].astype(int)),
    }
    with open(os.path.join(out_dir, "diagnostics.json"), "w") as fh:
        json.dump(diags, fh, indent=2, sort_keys=True)
    u0 = sol.u0()
    headline = {"u0": u0, "u0_stderr": sol.u0_stderr(),
                "clamped_total": int(sol.diagnostics["clamped"].sum())}
    # also emit the t=0 slice as (x, u) for downstream comparison
    _write_xu_csv(os.path.join(out_dir, "u0_grid.csv"), eval_x,
                  evaluate_u(sol, 0, eval_x[:, None]))
    return headline, [], ["solution.csv", "diagnostics.json", "u0_grid.csv"]


def _task_solve_obstacle(cfg, out_dir):
    model = cfg.build_model()
    driver = cfg.build_driver()
    terminal = cfg.build_terminal()
    obst = cfg.build_obstacle()
    weight = cfg.build_weight()
    paths = _simulate(cfg, model, driver)
    basis = _basis_from(cfg, paths)
    eval_x = _eval_grid(cfg, paths)
    refl = obstacle_mod.solve_reflected(
        model, driver, terminal, obst, paths, basis,
        schedule=cfg.schedule(), tol=cfg.numerics["tol"], eval_x=eval_x,
        weight=weight, picard_iters=cfg.numerics["picard"])
    artifacts = []
    for lvl, ufield in zip(refl.levels, refl.level_fields):
        name = f"u_level_{lvl:.0f}.csv"
        _write_xu_csv(os.path.join(out_dir, name), eval_x, ufield[0])
        artifacts.append(name)
    meas = obstacle_mod.estimate_reflection_measure(refl)
    with open(os.path.join(out_dir, "nu_histogram.csv"), "w") as fh:
        fh.write("t_bin,x_bin,t_center,x_center,density\n")
        tc = 0.5 * (meas.t_edges[:-1] + meas.t_edges[1:])
        xc = 0.5 * (meas.x_edges[:-1] + meas.x_edges[1:])
        for i in range(tc.size):
            for j in range(xc.size):
                fh.write(f"{i},{j},{tc[i]:.17g},{xc[j]:.17g},{meas.density[i, j]:.17g}\n")
    artifacts.append("nu_histogram.csv")
    trace = {"levels": _py(refl.trace), "pi_sequence": _py(list(meas.pi_sequence)),
             "converged": refl.converged, "direct_gap_rel": refl.direct_gap_rel}
    with open(os.path.join(out_dir, "trace.json"), "w") as fh:
        json.dump(trace, fh, indent=2, sort_keys=True)
    artifacts.append("trace.json")
    _write_xu_csv(os.path.join(out_dir, "u0_grid.csv"), eval_x, refl.level_fields[-1][0])
    artifacts.append("u0_grid.csv")
    headline = {"u0": refl.u0(), "converged": refl.converged,
                "final_level": float(refl.final_level),
                "penalty_norm": refl.trace[-1]["penalty_norm"],
                "skorokhod": refl.trace[-1]["skorokhod"],
                "direct_gap_rel": refl.direct_gap_rel}
    criteria = [{"name": "penalization_converged", "passed": bool(refl.converged),
                 "value": refl.trace[-1]["penalty_norm"],
                 "threshold": cfg.numerics["tol"]}]
    return headline, criteria, artifacts


def _oracle_eval(spec, cfg, out_dir, tag=""):
    kind = spec["kind"]
    prefix = f"oracle{tag}"
    if kind == "merton":
        price = oracle_mod.merton_price(
            spec.get("s0", 100.0), spec.get("strike", 100.0), spec.get("rate", 0.05),
            spec.get("sigma", 0.2), spec.get("horizon", 1.0),
            spec.get("intensity", 0.0), spec.get("jump_mean", 0.0),
            spec.get("jump_sd", 1e-8), n_terms=spec.get("n_terms", 60),
            kind=spec.get("option", "call"))
        payload = {"price": price, "error_estimate": 1e-10}
        with open(os.path.join(out_dir, f"{prefix}_price.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        return payload, [f"{prefix}_price.json"]
    if kind == "binomial":
        steps = spec.get("steps", 2000)
        price = oracle_mod.binomial_american(
            spec.get("s0", 100.0), spec.get("strike", 100.0), spec.get("rate", 0.05),
            spec.get("sigma", 0.2), spec.get("horizon", 1.0), steps,
            spec.get("option", "put"))
        half = oracle_mod.binomial_american(
            spec.get("s0", 100.0), spec.get("strike", 100.0), spec.get("rate", 0.05),
            spec.get("sigma", 0.2), spec.get("horizon", 1.0), steps // 2,
            spec.get("option", "put"))
        payload = {"price": price, "error_estimate": abs(price - half)}
        with open(os.path.join(out_dir, f"{prefix}_price.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        return payload, [f"{prefix}_price.json"]
    # finite difference
    model = cfg.build_model()
    driver = cfg.build_driver()
    terminal = cfg.build_terminal()
    obst = cfg.build_obstacle() if "obstacle" in cfg.raw else None
    grid = oracle_mod.FdGrid(
        spec.get("x_lo", -8.0), spec.get("x_hi", 8.0),
        spec.get("n_space", 800), spec.get("n_time", 400),
        bc=spec.get("bc", "dirichlet"))
    fd = oracle_mod.fd_solve_pide(model, driver, terminal, grid,
                                  obstacle=obst, horizon=spec.get("horizon", 1.0))
    name = f"{prefix}_fd.csv"
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write("time,x,u\n")
        stride = max(1, fd.times.size // 11)
        for i in range(0, fd.times.size, stride):
            for xj, uj in zip(fd.x, fd.values[i]):
                fh.write(f"{fd.times[i]:.17g},{xj:.17g},{uj:.17g}\n")
    payload = {"u0_mid": float(fd.interp(0.0, 0.5 * (grid.x_lo + grid.x_hi))),
               "cfl": fd.diagnostics["cfl"]}
    return payload, [name], fd


def _task_oracle(cfg, out_dir):
    result = _oracle_eval(cfg.raw["oracle"], cfg, out_dir)
    payload, artifacts = result[0], result[1]
    return dict(payload), [], artifacts


def _task_normcheck(cfg, out_dir):
    model = cfg.build_model()
    weight = cfg.build_weight()
    nc = cfg.raw.get("normcheck", {"radius": 9.0, "n_panels": 18,
                                   "nodes_per_panel": 8, "s_list": [0.1, 0.5, 1.0]})
    quad = normcheck.gauss_legendre_panels(nc["radius"], nc["n_panels"],
                                           nc["nodes_per_panel"])
    fam = normcheck.shipped_phi_family()
    report = normcheck.norm_ratio(model, weight, fam, 0.0, nc["s_list"], quad,
                                  cfg.numerics["paths"], cfg.seed)
    with open(os.path.join(out_dir, "norm_ratios.csv"), "w") as fh:
        fh.write("phi_id,s,ratio,stderr\n")
        for pid, s, ratio, se in report.rows:
            fh.write(f"{pid},{s:.17g},{ratio:.17g},{se:.17g}\n")
    lo, hi = report.bracket()
    summary = {"min_ratio": lo, "max_ratio": hi}
    with open(os.path.join(out_dir, "norm_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    ok = bool(np.isfinite(report.ratios).all() and lo > 0)
    criteria = [{"name": "ratios_positive_finite", "passed": ok,
                 "value": lo, "threshold": 0.0}]
    return summary, criteria, ["norm_ratios.csv", "norm_summary.json"]


def _task_compare(cfg, out_dir):
    cmp_block = cfg.raw["compare"]
    model = cfg.build_model()
    driver = cfg.build_driver()
    terminal = cfg.build_terminal()
    obst = cfg.build_obstacle() if "obstacle" in cfg.raw else None
    weight = cfg.build_weight()
    paths = _simulate(cfg, model, driver)
    basis = _basis_from(cfg, paths)

    region = cmp_block.get("region")
    n_grid = cmp_block["x_grid_n"]
    if region is not None and n_grid > 1:
        xq = np.linspace(region[0], region[1], n_grid)
    else:
        xq = np.array([cfg.numerics["x0"]])

    if obst is None:
        sol = solve_bsde(model, driver, terminal, paths, basis,
                         picard_iters=cfg.numerics["picard"])
        u_solver = evaluate_u(sol, 0, xq[:, None])
    else:
        refl = obstacle_mod.solve_reflected(
            model, driver, terminal, obst, paths, basis,
            schedule=cfg.schedule(), tol=cfg.numerics["tol"],
            weight=weight, picard_iters=cfg.numerics["picard"])
        u_solver = evaluate_u(refl.solution, 0, xq[:, None])
    _write_xu_csv(os.path.join(out_dir, "solver_u0.csv"), xq, u_solver)

    spec = cmp_block["oracle"]
    artifacts = ["solver_u0.csv", "oracle_u0.csv", "compare.csv"]
    if spec["kind"] == "fd":
        result = _oracle_eval(spec, cfg, out_dir, tag="_cmp")
        fd = result[2]
        u_oracle = fd.interp(0.0, xq)
        artifacts.extend(result[1])
    else:
        payload, extra = _oracle_eval(spec, cfg, out_dir, tag="_cmp")
        u_oracle = np.full(xq.size, payload["price"])
        artifacts.extend(extra)
    _write_xu_csv(os.path.join(out_dir, "oracle_u0.csv"), xq, u_oracle)

    table = compare_report(os.path.join(out_dir, "solver_u0.csv"),
                           os.path.join(out_dir, "oracle_u0.csv"),
                           cmp_block["tol_rel"], region=None, weight=weight)
    with open(os.path.join(out_dir, "compare.csv"), "w") as fh:
        fh.write("x,solver,oracle,rel_err\n")
        for x, us, uo, re in table.rows():
            fh.write(f"{x:.17g},{us:.17g},{uo:.17g},{re:.17g}\n")
    headline = {"sup_rel_err": table.sup_rel, "l2_weighted_rel": table.l2_weighted,
                "tol_rel": table.tol_rel}
    criteria = [{"name": "solver_matches_oracle", "passed": table.passed,
                 "value": table.sup_rel, "threshold": table.tol_rel}]
    return headline, criteria, artifacts


_TASK_FNS = {
    "simulate": _task_simulate,
    "solve": _task_solve,
    "solve-obstacle": _task_solve_obstacle,
    "oracle": _task_oracle,
    "normcheck": _task_normcheck,
    "compare": _task_compare,
}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def run_experiment(cfg, out_dir=None, flags=None):
    """Run one experiment; returns (Report, exit_code) and writes report.json.

    A lock file serializes experiments per output directory.  Flags (seed,
    threads, deterministic) are echoed into the hashed body; timestamps and
    paths stay in the unhashed meta block.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = validate_config(cfg)
    flags = dict(flags or {})
    out_dir = out_dir or cfg.raw.get("output") or "out"
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out_dir!r} is locked by another "
                          f"experiment (remove {lock_path} if stale)")
    start = time.time()
    try:
        config_hash = hashlib.sha256(cfg.canonical_json().encode()).hexdigest()
        body = {
            "task": cfg.task,
            "config_hash": config_hash,
            "flags": {"seed": cfg.seed,
                      "threads": int(flags.get("threads", 1)),
                      "deterministic": bool(flags.get("deterministic", True))},
        }
        try:
            headline, criteria, artifacts = _TASK_FNS[cfg.task](cfg, out_dir)
            body["headline"] = _py(headline)
            body["criteria"] = _py(criteria)
            body["artifacts"] = sorted(artifacts + ["report.json"])
            code = EXIT_OK if all(c["passed"] for c in criteria) else EXIT_CRITERION
            body["status"] = "ok" if code == EXIT_OK else "criterion-failure"
        except SolverError as exc:
            body["status"] = "error"
            body["error"] = {"code": exc.code, "message": str(exc)}
            body["criteria"] = []
            body["artifacts"] = ["report.json"]
            code = EXIT_ERROR
        except Exception as exc:  # noqa: BLE001 - report, then fail with code 1
            body["status"] = "error"
            body["error"] = {"code": "E_ERROR",
                             "message": f"{type(exc).__name__}: {exc}"}
            body["criteria"] = []
            body["artifacts"] = ["report.json"]
            code = EXIT_ERROR
        meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "elapsed_s": round(time.time() - start, 3),
                "out_dir": os.path.abspath(out_dir)}
        report = Report(body=body, meta=meta)
        report.write(os.path.join(out_dir, "report.json"))
        return report, code
    finally:
        os.close(lock_fd)
        os.unlink(lock_path)


def run_config_file(path, out_dir=None, flags=None, seed_override=None):
    with open(path) as fh:
        raw = json.load(fh)
    if seed_override is not None:
        raw["seed"] = seed_override
    cfg = validate_config(raw)
    return run_experiment(cfg, out_dir=out_dir, flags=flags)
