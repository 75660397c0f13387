"""Reflected problem via penalization.

Runs the backward solver with the penalty driver f + n (y - h)^- along an
increasing schedule of levels, extracts the nondecreasing compensation
process from the penalty terms, estimates the reflection measure as a
space-time histogram of n (u_n - h)^-, and provides the flat-off
(Skorokhod) and support diagnostics.  A direct-reflection solve on the same
paths serves as a cross-check where no exact solution exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsde import BsdeSolution, evaluate_u, solve_bsde
from .errors import NoConvergenceError

__all__ = [
    "ReflectedSolution",
    "ReflectionMeasureEstimate",
    "SkorokhodReport",
    "SupportReport",
    "default_schedule",
    "solve_penalized",
    "solve_reflected",
    "skorokhod_gap",
    "estimate_reflection_measure",
    "support_check",
    "penalty_increments",
    "penalty_norm",
]


def default_schedule(max_exponent=12):
    """Geometric penalty schedule 1, 2, 4, ..., 2^max_exponent."""
    return tuple(2**k for k in range(max_exponent + 1))


def solve_penalized(model, driver, terminal, obstacle, paths, basis, level,
                    picard_iters=3, clamp=None):
    """One penalized solve: driver plus level * (y - h(t, x))^-.

    ``level`` = 0 reproduces the unpenalized solve exactly.  The penalty is
    resolved in closed form inside the backward step, so arbitrarily large
    levels stay stable.
    """
    if level < 0:
        raise ValueError("penalty level must be >= 0")
    if level == 0:
        return solve_bsde(model, driver, terminal, paths, basis,
                          picard_iters=picard_iters, clamp=clamp)
    return solve_bsde(model, driver, terminal, paths, basis,
                      picard_iters=picard_iters, clamp=clamp,
                      penalty_level=level, obstacle=obstacle)


def penalty_increments(sol, obstacle_values):
    """Per path and step compensation increments n (Y_k - L_k)^- dt, (N, M)."""
    if sol.penalty_level <= 0:
        return np.zeros((sol.n_steps, sol.y.shape[1]))
    dt = sol.grid.dt
    gap = obstacle_values[:-1] - sol.y[:-1]
    return sol.penalty_level * np.maximum(gap, 0.0) * dt


def obstacle_along_paths(obstacle, sol):
    """Obstacle values h(t_k, X_k) on the solution's paths, (N+1, M)."""
    times = sol.grid.nodes
    return np.stack([np.asarray(obstacle(times[k], sol.states[k]), float)
                     for k in range(sol.n_steps + 1)])


def _u_field(sol, eval_x):
    """Fitted u on (times x eval grid), including the terminal slice."""
    pts = np.asarray(eval_x, float)[:, None]
    rows = [evaluate_u(sol, k, pts) for k in range(sol.n_steps + 1)]
    return np.stack(rows)


def penalty_norm(u_field, h_field, weight, eval_x, dt, cover=None):
    """Weighted space-time L2 norm of (u - h)^- on the evaluation grid.

    ``cover`` masks (time, x) samples to the region the paths actually
    visit; the fitted field is not an estimate outside it.
    """
    neg = np.maximum(h_field - u_field, 0.0)
    if cover is not None:
        neg = neg * cover
    rho = weight(np.asarray(eval_x, float)[:, None])
    wx = _trap_weights(np.asarray(eval_x, float))
    space = np.sum(neg**2 * rho * wx, axis=1)
    wt = np.full(space.size, dt)
    wt[0] *= 0.5
    wt[-1] *= 0.5
    return float(math.sqrt(np.sum(space * wt)))


def coverage_mask(states, eval_x, quantiles=(0.005, 0.995), margin=None):
    """Boolean (n_steps+1, n_eval): which grid points the cloud covers per time.

    Uses per-time quantiles of the path cloud so that one stray path does
    not declare a region estimable.
    """
    eval_x = np.asarray(eval_x, float)
    if margin is None:
        margin = 2.0 * (eval_x[-1] - eval_x[0]) / max(eval_x.size - 1, 1)
    lo = np.quantile(states[:, :, 0], quantiles[0], axis=1) - margin
    hi = np.quantile(states[:, :, 0], quantiles[1], axis=1) + margin
    return (eval_x[None, :] >= lo[:, None]) & (eval_x[None, :] <= hi[:, None])


def _trap_weights(x):
    if x.size == 1:
        return np.ones(1)
    w = np.empty_like(x)
    w[0] = (x[1] - x[0]) / 2
    w[-1] = (x[-1] - x[-2]) / 2
    w[1:-1] = (x[2:] - x[:-2]) / 2
    return w


@dataclass
class ReflectedSolution:
    """Penalized-limit solution with convergence trace and cross-checks.

    ``solution`` is the final penalized level; ``k_increments`` its
    compensation increments (N, M); ``level_fields`` the fitted u of every
    level on (times x eval_x).  ``direct`` is the direct-reflection solve on
    the same paths and ``direct_gap`` the weighted L2 distance between the
    two u fields (the mutual-validation diagnostic).
    """

    solution: BsdeSolution
    obstacle: object
    obstacle_values: np.ndarray
    k_increments: np.ndarray
    eval_x: np.ndarray
    cover: np.ndarray
    levels: tuple
    level_fields: list
    trace: list
    converged: bool
    direct: BsdeSolution
    direct_gap: float
    direct_gap_rel: float
    weight: object

    @property
    def final_level(self):
        return self.levels[-1]

    def u0(self):
        return self.solution.u0()

    def k_terminal(self):
        """Total compensation per path, K_T, exactly the sum of increments."""
        return self.k_increments.sum(axis=0)


@dataclass(frozen=True)
class SkorokhodReport:
    raw: float
    normalized: float


def skorokhod_gap(sol_or_reflected, obstacle_values=None, k_increments=None):
    """Discrete flat-off defect of a penalized solution.

    Averages sum_k |Y_k - L_k| dK_k over paths: the magnitude of the signed
    flat-off integral of the penalized pair, which the penalization drives
    to zero.  (Pairing dK with the positive part at the same step is zero by
    construction, since the penalty acts only below the obstacle.)  The
    headline diagnostic is the defect normalized by mean K_T times the
    largest |Y - L|.
    """
    if isinstance(sol_or_reflected, ReflectedSolution):
        sol = sol_or_reflected.solution
        lvals = sol_or_reflected.obstacle_values
        dk = sol_or_reflected.k_increments
    else:
        sol = sol_or_reflected
        lvals = obstacle_values
        dk = k_increments
    raw = float(np.mean(np.sum(np.abs(sol.y[:-1] - lvals[:-1]) * dk, axis=0)))
    k_total = float(np.mean(dk.sum(axis=0)))
    sup_gap = float(np.abs(sol.y - lvals).max())
    denom = k_total * sup_gap
    normalized = raw / denom if denom > 0 else 0.0
    return SkorokhodReport(raw=raw, normalized=normalized)


def solve_reflected(model, driver, terminal, obstacle, paths, basis,
                    schedule=None, tol=1e-3, eval_x=None, weight=None,
                    picard_iters=3, clamp=None, strict=False):
    """Penalization scheme along an increasing schedule of levels.

    Stops when the weighted space-time norm of (u_n - h)^- falls below
    ``tol`` or the schedule is exhausted; the trace records per level the
    penalty norm, flat-off defect, weighted measure mass and the value at
    the initial time.  Also runs the direct-reflection cross-check
    (y <- max(y, h) inside the backward loop) on the same paths and reports
    the gap between the two u fields.  With ``strict`` the exhausted
    schedule raises; otherwise the result is returned flagged.
    """
    from .model import WeightFunction

    schedule = tuple(schedule) if schedule is not None else default_schedule()
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be nonempty and increasing")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if weight is None:
        weight = WeightFunction(obstacle.kappa + model.dim + 1)
    if eval_x is None:
        lo, hi = float(basis.lo[0]), float(basis.hi[0])
        eval_x = np.linspace(lo, hi, 101)
    eval_x = np.asarray(eval_x, float)

    # compatibility of the data: the obstacle may not exceed the terminal
    # condition at the horizon, else the limit problem is ill-posed
    g_T = np.asarray(terminal(paths.states[-1]), float)
    h_T = np.asarray(obstacle(paths.grid.t1, paths.states[-1]), float)
    bad = float(np.mean(h_T > g_T + 1e-9 * (1 + np.abs(g_T))))
    if bad > 0.001:
        raise ValueError(
            f"obstacle exceeds the terminal condition at the horizon on "
            f"{bad:.1%} of the cloud; reflected problems require h(T, .) <= g")

    dt = paths.grid.dt
    cover = coverage_mask(paths.states, eval_x)
    hfield = np.stack([np.asarray(obstacle(paths.grid.nodes[k], eval_x[:, None]), float)
                       for k in range(paths.grid.n_steps + 1)])
    rho = weight(eval_x[:, None])
    wx = _trap_weights(eval_x)
    wt = np.full(paths.grid.n_steps + 1, dt)
    wt[0] *= 0.5
    wt[-1] *= 0.5

    levels = []
    fields = []
    trace = []
    converged = False
    sol = None
    lvals = None
    dk = None
    for level in schedule:
        sol = solve_penalized(model, driver, terminal, obstacle, paths, basis,
                              level, picard_iters=picard_iters, clamp=clamp)
        lvals = obstacle_along_paths(obstacle, sol)
        dk = penalty_increments(sol, lvals)
        ufield = _u_field(sol, eval_x)
        pnorm = penalty_norm(ufield, hfield, weight, eval_x, dt, cover)
        sk = skorokhod_gap(sol, lvals, dk)
        neg = np.maximum(hfield - ufield, 0.0) * cover
        pi_n = float(level * np.sum(wt[:, None] * neg * rho[None, :] * wx[None, :]))
        levels.append(level)
        fields.append(ufield)
        trace.append({"level": level, "penalty_norm": pnorm,
                      "skorokhod": sk.normalized, "pi": pi_n,
                      "u0": sol.u0()})
        if pnorm < tol:
            converged = True
            break
    if not converged and strict:
        raise NoConvergenceError(
            f"penalty norm {trace[-1]['penalty_norm']:.3g} above tol {tol:.3g} "
            f"after level {levels[-1]}", trace=trace)

    direct = solve_bsde(model, driver, terminal, paths, basis,
                        picard_iters=picard_iters, clamp=clamp,
                        obstacle=obstacle, reflect=True)
    dfield = _u_field(direct, eval_x)
    diff2 = np.sum(wt[:, None] * cover * (fields[-1] - dfield) ** 2
                   * rho[None, :] * wx[None, :])
    base2 = np.sum(wt[:, None] * cover * dfield**2 * rho[None, :] * wx[None, :])
    gap = float(math.sqrt(diff2))
    gap_rel = float(math.sqrt(diff2 / base2)) if base2 > 0 else 0.0

    return ReflectedSolution(
        solution=sol, obstacle=obstacle, obstacle_values=lvals,
        k_increments=dk, eval_x=eval_x, cover=cover, levels=tuple(levels),
        level_fields=fields, trace=trace, converged=converged,
        direct=direct, direct_gap=gap, direct_gap_rel=gap_rel, weight=weight,
    )


@dataclass
class ReflectionMeasureEstimate:
    """Space-time histogram of the penalization measure n (u_n - h)^-.

    ``density`` has shape (t_bins, x_bins) and approximates the measure's
    Lebesgue density on each cell; ``pi_total`` is the weighted total mass
    with the weight evaluated at cell centers; ``pi_sequence`` tracks the
    mass over the whole penalty schedule.
    """

    t_edges: np.ndarray
    x_edges: np.ndarray
    density: np.ndarray
    gap_mean: np.ndarray
    pi_total: float
    pi_sequence: tuple
    level: float


def estimate_reflection_measure(reflected, weight=None, t_bins=10, x_bins=20):
    """Histogram the final-level penalty density on (t, x) cells.

    Cell values average n (u_n - h)^- over the evaluation-grid samples that
    fall in the cell; the weighted mass pi_n uses the weight at cell centers
    times cell areas.  The masses of every schedule level are reported so
    their stabilization can be asserted.
    """
    weight = weight if weight is not None else reflected.weight
    sol = reflected.solution
    times = sol.grid.nodes
    x = reflected.eval_x
    t_edges = np.linspace(times[0], times[-1], t_bins + 1)
    x_edges = np.linspace(x[0], x[-1], x_bins + 1)

    hfield = np.stack([np.asarray(reflected.obstacle(times[k], x[:, None]), float)
                       for k in range(sol.n_steps + 1)])

    t_idx = np.clip(np.searchsorted(t_edges, times, side="right") - 1, 0, t_bins - 1)
    x_idx = np.clip(np.searchsorted(x_edges, x, side="right") - 1, 0, x_bins - 1)
    flat = (t_idx[:, None] * x_bins + x_idx[None, :]).ravel()
    cover = reflected.cover.astype(float).ravel()
    cnt = np.bincount(flat, weights=cover, minlength=t_bins * x_bins)

    def mass_and_density(ufield, level):
        # only path-covered samples enter the cell averages
        neg = level * np.maximum(hfield - ufield, 0.0) * reflected.cover
        gap = (ufield - hfield) * reflected.cover
        dens = np.bincount(flat, weights=neg.ravel(), minlength=t_bins * x_bins)
        gmean = np.bincount(flat, weights=gap.ravel(), minlength=t_bins * x_bins)
        nz = cnt > 0
        dens[nz] /= cnt[nz]
        gmean[nz] /= cnt[nz]
        dens = dens.reshape(t_bins, x_bins)
        gmean = gmean.reshape(t_bins, x_bins)
        centers = 0.5 * (x_edges[:-1] + x_edges[1:])
        rho = weight(centers[:, None])
        areas = np.outer(np.diff(t_edges), np.diff(x_edges))
        pi = float(np.sum(dens * rho[None, :] * areas))
        return dens, gmean, pi

    pis = []
    density = gap_mean = None
    for lvl, uf in zip(reflected.levels, reflected.level_fields):
        density, gap_mean, pi = mass_and_density(uf, lvl)
        pis.append(pi)
    return ReflectionMeasureEstimate(
        t_edges=t_edges, x_edges=x_edges, density=density, gap_mean=gap_mean,
        pi_total=pis[-1], pi_sequence=tuple(pis), level=reflected.final_level,
    )


@dataclass(frozen=True)
class SupportReport:
    fraction: float
    trivial_mass: bool


def support_check(reflected, measure, delta):
    """Fraction of the measure's mass on cells where u - h exceeds delta.

    Small values certify that the measure charges only the contact region at
    resolution delta.  Zero total mass is flagged, not an error.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if measure.pi_total <= 0:
        return SupportReport(fraction=0.0, trivial_mass=True)
    centers = 0.5 * (measure.x_edges[:-1] + measure.x_edges[1:])
    rho = reflected.weight(centers[:, None]) if reflected.weight is not None else np.ones_like(centers)
    areas = np.outer(np.diff(measure.t_edges), np.diff(measure.x_edges))
    contrib = measure.density * rho[None, :] * areas
    off = measure.gap_mean > delta
    frac = float(contrib[off].sum() / measure.pi_total)
    return SupportReport(fraction=frac, trivial_mass=False)
