"""Backward solver: least-squares regression backward induction.

Works on a simulated path bundle.  At each step the conditional
expectations of the next value, of its product with the Brownian increment,
and of its product with the compensated jump-functional increments are all
estimated by one regression against the same basis; the new value solves the
implicit driver relation by Picard sweeps.  An optional obstacle penalty is
resolved in closed form inside each sweep, which keeps the update stable for
arbitrarily large penalty levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (ContractionError, DomainError, NumericError,
                     SingularRegressionError, ZeroDenominatorError)

__all__ = [
    "PolynomialBasis",
    "LocalAffineBasis",
    "make_basis",
    "BsdeSolution",
    "solve_bsde",
    "evaluate_u",
    "evaluate_z",
    "check_z_representation",
    "check_apriori_estimate",
    "default_clamp_bound",
]

_RIDGE_SCALE = 1e-8
_MIN_PATHS_PER_REGRESSOR = 10


def _check_floor(n_features, m):
    if n_features > max(1, m // _MIN_PATHS_PER_REGRESSOR):
        raise ValueError(
            f"{n_features} basis functions exceed the floor of "
            f"{_MIN_PATHS_PER_REGRESSOR} paths per regressor at {m} paths")


def _is_degenerate(x):
    span = x.max(axis=0) - x.min(axis=0)
    return bool(np.all(span <= 1e-12 * (1.0 + np.abs(x).max(axis=0))))


# ---------------------------------------------------------------------------
# regression bases
# ---------------------------------------------------------------------------

class PolynomialBasis:
    """Global polynomial basis of bounded total degree over a box.

    Coordinates are affinely mapped to [-1, 1] before forming monomials so
    the normal equations stay well conditioned on wide boxes.  Single-target
    coefficients have shape (n_features,).
    """

    kind = "poly"

    def __init__(self, degree, box, ridge_scale=_RIDGE_SCALE):
        self.degree = int(degree)
        lo = np.atleast_1d(np.asarray(box[0], float))
        hi = np.atleast_1d(np.asarray(box[1], float))
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent")
        self.lo, self.hi = lo, hi
        self.dim = lo.size
        self.ridge_scale = ridge_scale
        self._powers = _total_degree_powers(self.dim, self.degree)

    @property
    def n_features(self):
        return self._powers.shape[0]

    @property
    def coef_shape(self):
        return (self.n_features,)

    def contains(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        pad = 1e-9 * (self.hi - self.lo)
        return np.all((x >= self.lo - pad) & (x <= self.hi + pad), axis=1)

    def design(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        z = 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0
        out = np.ones((x.shape[0], self.n_features))
        for j, pw in enumerate(self._powers):
            for k in range(self.dim):
                if pw[k]:
                    out[:, j] *= z[:, k] ** pw[k]
        return out

    def fit(self, x, targets):
        """Least squares of each target column on the basis.

        Returns (coeffs, info); coeffs has shape (n_features, n_targets).
        Degenerate designs (all points numerically equal) fall back to an
        intercept-only fit.
        """
        targets = _as_columns(targets)
        x = np.atleast_2d(np.asarray(x, float))
        _check_floor(self.n_features, x.shape[0])
        if _is_degenerate(x):
            coeffs = np.zeros((self.n_features, targets.shape[1]))
            coeffs[0] = targets.mean(axis=0)
            return coeffs, {"cond": 1.0, "degenerate": True, "ridge": 0.0}
        phi = self.design(x)
        return _solve_normal(phi, targets, self.ridge_scale)

    def predict(self, coeffs, x):
        single = coeffs.ndim == 1
        c = coeffs[:, None] if single else coeffs
        out = self.design(x) @ c
        return out[:, 0] if single else out


class LocalAffineBasis:
    """Partition of the box into cells with one affine function per cell.

    The normal equations decompose into per-cell (dim+1) x (dim+1) blocks,
    so fitting is O(n_paths) regardless of the number of cells.  Cells with
    too few points degrade to their mean; empty cells borrow the nearest
    fitted cell so the field stays defined on the whole box.  Single-target
    coefficients have shape (n_cells, dim+1).
    """

    kind = "local"

    def __init__(self, cells, box, ridge_scale=_RIDGE_SCALE, min_points=8):
        lo = np.atleast_1d(np.asarray(box[0], float))
        hi = np.atleast_1d(np.asarray(box[1], float))
        if np.any(hi <= lo):
            raise ValueError("box must have positive extent")
        self.lo, self.hi = lo, hi
        self.dim = lo.size
        self.cells = np.broadcast_to(np.asarray(cells, int), (self.dim,)).copy()
        if np.any(self.cells < 1):
            raise ValueError("need at least one cell per axis")
        self.n_cells = int(np.prod(self.cells))
        self.ridge_scale = ridge_scale
        self.min_points = min_points

    @property
    def n_features(self):
        return self.n_cells * (self.dim + 1)

    @property
    def coef_shape(self):
        return (self.n_cells, self.dim + 1)

    def contains(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        pad = 1e-9 * (self.hi - self.lo)
        return np.all((x >= self.lo - pad) & (x <= self.hi + pad), axis=1)

    def cell_index(self, x):
        widths = (self.hi - self.lo) / self.cells
        idx = np.clip(((x - self.lo) / widths).astype(int), 0, self.cells - 1)
        flat = idx[:, 0]
        for k in range(1, self.dim):
            flat = flat * self.cells[k] + idx[:, k]
        return flat

    def _features(self, x):
        widths = (self.hi - self.lo) / self.cells
        idx = np.clip(((x - self.lo) / widths).astype(int), 0, self.cells - 1)
        centers = self.lo + (idx + 0.5) * widths
        z = 2.0 * (x - centers) / widths
        return np.concatenate([np.ones((x.shape[0], 1)), z], axis=1)

    def fit(self, x, targets):
        targets = _as_columns(targets)
        m, r = targets.shape
        x = np.atleast_2d(np.asarray(x, float))
        _check_floor(self.n_features, m)
        p = self.dim + 1
        if _is_degenerate(x):
            coeffs = np.zeros((self.n_cells, p, r))
            coeffs[:, 0, :] = targets.mean(axis=0)
            return coeffs, {"cond": 1.0, "degenerate": True, "ridge": 0.0}
        cell = self.cell_index(x)
        feats = self._features(x)

        gram = np.zeros((self.n_cells, p, p))
        rhs = np.zeros((self.n_cells, p, r))
        for a in range(p):
            for b in range(a, p):
                np.add.at(gram[:, a, b], cell, feats[:, a] * feats[:, b])
            np.add.at(rhs[:, a, :], cell, feats[:, a, None] * targets)
        iu = np.triu_indices(p, 1)
        gram[:, iu[1], iu[0]] = gram[:, iu[0], iu[1]]

        counts = gram[:, 0, 0]
        coeffs = np.zeros((self.n_cells, p, r))
        filled = counts >= 1
        thin = filled & (counts < self.min_points)
        full = filled & ~thin
        coeffs[thin, 0, :] = rhs[thin, 0, :] / counts[thin, None]
        max_cond = 1.0
        if np.any(full):
            g = gram[full]
            ridge = self.ridge_scale * np.trace(g, axis1=1, axis2=2) / p
            g = g + ridge[:, None, None] * np.eye(p)
            try:
                coeffs[full] = np.linalg.solve(g, rhs[full])
            except np.linalg.LinAlgError as exc:
                raise SingularRegressionError(
                    "local regression block singular beyond ridge repair") from exc
            eig = np.linalg.eigvalsh(g)
            max_cond = float(np.max(eig[:, -1] / np.maximum(eig[:, 0], 1e-300)))
        if not np.all(np.isfinite(coeffs)):
            raise SingularRegressionError("non-finite local regression coefficients")
        if not filled.all() and filled.any():
            fitted_idx = np.nonzero(filled)[0]
            for c in np.nonzero(~filled)[0]:
                nearest = fitted_idx[np.argmin(np.abs(fitted_idx - c))]
                coeffs[c, 0, :] = coeffs[nearest, 0, :]
                coeffs[c, 1:, :] = 0.0
        return coeffs, {"cond": max_cond, "degenerate": False, "ridge": 0.0}

    def predict(self, coeffs, x):
        single = coeffs.ndim == 2
        c = coeffs[..., None] if single else coeffs
        x = np.atleast_2d(np.asarray(x, float))
        cell = self.cell_index(x)
        feats = self._features(x)
        out = np.einsum("mp,mpr->mr", feats, c[cell])
        return out[:, 0] if single else out


def make_basis(kind, box, degree=4, cells=40, ridge_scale=_RIDGE_SCALE):
    if kind == "poly":
        return PolynomialBasis(degree, box, ridge_scale)
    if kind == "local":
        return LocalAffineBasis(cells, box, ridge_scale)
    raise ValueError(f"unknown basis kind {kind!r}")


def _as_columns(targets):
    t = np.asarray(targets, float)
    return t[:, None] if t.ndim == 1 else t


def _total_degree_powers(dim, degree):
    powers = []

    def rec(prefix, remaining):
        if len(prefix) == dim:
            powers.append(tuple(prefix))
            return
        for k in range(remaining + 1):
            rec(prefix + [k], remaining - k)

    rec([], degree)
    powers.sort(key=lambda pw: (sum(pw), pw))
    return np.array(powers, dtype=int)


def _solve_normal(phi, targets, ridge_scale):
    gram = phi.T @ phi
    rhs = phi.T @ targets
    b = gram.shape[0]
    ridge = ridge_scale * np.trace(gram) / b
    for _ in range(4):
        try:
            coeffs = np.linalg.solve(gram + ridge * np.eye(b), rhs)
        except np.linalg.LinAlgError:
            coeffs = None
        if coeffs is not None and np.all(np.isfinite(coeffs)):
            cond = float(np.linalg.cond(gram + ridge * np.eye(b)))
            return coeffs, {"cond": cond, "degenerate": False, "ridge": float(ridge)}
        ridge = max(ridge * 100.0, 1e-12 * np.trace(gram) / b)
    raise SingularRegressionError("regression normal system singular beyond ridge repair")


# ---------------------------------------------------------------------------
# solution container and solver
# ---------------------------------------------------------------------------

@dataclass
class BsdeSolution:
    """Backward solution: per-step regression coefficients and path values.

    ``y`` has shape (n_steps+1, n_paths); ``z`` (n_steps, n_paths, dim);
    ``vbar`` (n_steps, n_paths, q).  Coefficient arrays are scaled so that
    ``basis.predict`` returns the corresponding field directly.  For
    penalized solves ``penalty_level``/``obstacle`` record the penalty and
    evaluation applies the same closed-form resolution; for direct-reflection
    solves ``reflected`` is set and evaluation applies the pointwise max.
    """

    grid: object
    basis: object
    driver: object
    terminal: Callable
    coef_y: np.ndarray
    coef_z: np.ndarray
    coef_v: np.ndarray
    y: np.ndarray
    z: np.ndarray
    vbar: np.ndarray
    states: np.ndarray
    diagnostics: dict
    picard_iters: int
    penalty_level: float = 0.0
    obstacle: Optional[object] = None
    reflected: bool = False
    clamp_bound: Optional[float] = None

    @property
    def n_steps(self):
        return self.y.shape[0] - 1

    @property
    def times(self):
        return self.grid.nodes

    def u0(self):
        """Value at the initial time, averaged over paths."""
        return float(self.y[0].mean())

    def u0_stderr(self):
        """Monte-Carlo scale for u0: stderr of the terminal payoff mean.

        The regression smooths path values, so this is a conservative scale
        for the error of ``u0``.
        """
        g = np.asarray(self.terminal(self.states[-1]), float)
        return float(g.std(ddof=1) / math.sqrt(g.size))


def default_clamp_bound(driver, terminal, paths, obstacle=None):
    """A-priori bound |Y| <= B from terminal and driver growth.

    B = (max |g| + horizon * max |f(.,.,0,0,0)| + max |h|) * exp(C_f * horizon)
    with maxima over the simulated cloud and 10% headroom.
    """
    g = np.abs(np.asarray(terminal(paths.states[-1]), float))
    horizon = paths.grid.t1 - paths.grid.t0
    f0max = 0.0
    hmax = 0.0
    stride = max(1, paths.grid.n_steps // 8)
    for k in range(0, paths.grid.n_steps + 1, stride):
        f0 = driver.f_zero(paths.grid.nodes[k], paths.states[k])
        f0max = max(f0max, float(np.abs(f0).max()))
        if obstacle is not None:
            hv = obstacle(paths.grid.nodes[k], paths.states[k])
            hmax = max(hmax, float(np.abs(hv).max()))
    base = float(g.max(initial=0.0)) + horizon * f0max + hmax
    return 1.1 * base * math.exp(driver.lipschitz * horizon) + 1e-12


def _resolve_penalty(a, obstacle_vals, level_dt):
    """Solve y = a + level*dt*(y - h)^- in closed form (semi-implicit penalty)."""
    lifted = (a + level_dt * obstacle_vals) / (1.0 + level_dt)
    return np.maximum(a, lifted)


def solve_bsde(model, driver, terminal, paths, basis, picard_iters=3,
               clamp=None, penalty_level=0.0, obstacle=None, reflect=False):
    """Backward induction over a path bundle.

    Per step: regress the next value on the basis, then regress the products
    of the centered value with the Brownian and compensated jump increments
    (divided by dt these estimate the z-field and the jump functionals), and
    solve the implicit relation y = E[Y_next | X] + dt * f(t, X, y, z, vbar)
    by ``picard_iters`` fixed-point sweeps.  ``penalty_level`` > 0 adds the
    obstacle penalty, resolved in closed form inside each sweep; ``reflect``
    instead applies the direct pointwise reflection y = max(y, h) after the
    driver update.

    Requires dt * lipschitz(f) < 1 for the sweeps to contract.
    """
    grid = paths.grid
    dt = grid.dt
    if dt * driver.lipschitz >= 1.0:
        raise ContractionError(
            f"dt * C_f = {dt * driver.lipschitz:.3g} >= 1; refine the grid")
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    if (penalty_level > 0 or reflect) and obstacle is None:
        raise ValueError("penalty or reflection requires an obstacle")

    n, m, d = grid.n_steps, paths.n_paths, paths.dim
    q = driver.n_functionals
    if q:
        dmu = paths.dmu if (paths.dmu is not None and paths.dmu.shape[0] == q) \
            else paths.compensated_increments(driver.functionals, model.jump_measure)
    else:
        dmu = np.zeros((0, n, m))

    if clamp is None:
        clamp = default_clamp_bound(driver, terminal, paths, obstacle)

    cshape = basis.coef_shape
    coef_y = np.zeros((n,) + cshape)
    coef_z = np.zeros((n, d) + cshape)
    coef_v = np.zeros((n, q) + cshape)

    y_all = np.empty((n + 1, m))
    z_all = np.zeros((n, m, d))
    v_all = np.zeros((n, m, q))
    diag = {"cond": np.zeros(n), "resid": np.zeros(n),
            "clamped": np.zeros(n, dtype=int),
            "degenerate": np.zeros(n, dtype=bool), "ridge": np.zeros(n)}

    y = np.asarray(terminal(paths.states[-1]), dtype=float).reshape(m)
    if not np.isfinite(y).all():
        raise NumericError("non-finite terminal values")
    y_all[n] = y
    level_dt = penalty_level * dt

    for k in range(n - 1, -1, -1):
        xk = paths.states[k]
        cy, info = basis.fit(xk, y)
        cy = cy[..., 0]
        cond_exp = basis.predict(cy, xk)
        # center the martingale-increment regressions on the fitted
        # conditional expectation: same projection, exact on constants,
        # much lower variance
        resid = y - cond_exp
        targets = np.empty((m, d + q))
        targets[:, :d] = resid[:, None] * paths.brownian[k]
        for i in range(q):
            targets[:, d + i] = resid * dmu[i, k]
        czv, info2 = basis.fit(xk, targets)
        pred = basis.predict(czv, xk)
        z = pred[:, :d] / dt
        vb = pred[:, d:] / dt

        coef_y[k] = cy
        for j in range(d):
            coef_z[k, j] = czv[..., j] / dt
        for i in range(q):
            coef_v[k, i] = czv[..., d + i] / dt
        info = {"cond": max(info["cond"], info2["cond"]),
                "degenerate": info["degenerate"],
                "ridge": max(info["ridge"], info2["ridge"])}

        t_k = grid.nodes[k]
        h_k = obstacle(t_k, xk) if obstacle is not None else None
        ynew = cond_exp.copy()
        for _ in range(picard_iters):
            a = cond_exp + dt * np.asarray(driver.f(t_k, xk, ynew, z, vb), dtype=float)
            ynew = _resolve_penalty(a, h_k, level_dt) if penalty_level > 0 else a
        if reflect:
            ynew = np.maximum(ynew, h_k)
        n_clamped = int(np.sum(np.abs(ynew) > clamp))
        if n_clamped:
            ynew = np.clip(ynew, -clamp, clamp)
        if not np.isfinite(ynew).all():
            raise NumericError(f"non-finite backward value at step {k}")

        diag["cond"][k] = info["cond"]
        diag["degenerate"][k] = info["degenerate"]
        diag["ridge"][k] = info.get("ridge", 0.0)
        diag["resid"][k] = float(np.sqrt(np.mean((y - cond_exp) ** 2)))
        diag["clamped"][k] = n_clamped

        y = ynew
        y_all[k] = y
        z_all[k] = z
        v_all[k] = vb

    return BsdeSolution(
        grid=grid, basis=basis, driver=driver, terminal=terminal,
        coef_y=coef_y, coef_z=coef_z, coef_v=coef_v,
        y=y_all, z=z_all, vbar=v_all, states=paths.states,
        diagnostics=diag, picard_iters=picard_iters,
        penalty_level=penalty_level,
        obstacle=obstacle if (penalty_level > 0 or reflect) else None,
        reflected=reflect, clamp_bound=clamp,
    )


def evaluate_u(sol, k, x):
    """Fitted value function at (t_k, x); x is a point or (m, dim) batch.

    Applies the same frozen-coefficient driver correction (and penalty or
    reflection, when recorded) as the backward pass.  Refuses to extrapolate
    outside the basis box.
    """
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[1] != sol.states.shape[2]:
        raise ValueError("point dimension does not match the solution")
    inside = sol.basis.contains(x)
    if not inside.all():
        bad = x[~inside][0]
        raise DomainError(f"evaluation point {bad!r} outside the basis domain box")
    n = sol.n_steps
    if k == n:
        return np.asarray(sol.terminal(x), dtype=float).reshape(x.shape[0])
    if not 0 <= k < n:
        raise ValueError(f"step {k} outside 0..{n}")
    d = sol.states.shape[2]
    q = sol.vbar.shape[2]
    cond_exp = sol.basis.predict(sol.coef_y[k], x)
    z = (np.column_stack([sol.basis.predict(sol.coef_z[k, j], x) for j in range(d)])
         if d else np.zeros((x.shape[0], 0)))
    vb = (np.column_stack([sol.basis.predict(sol.coef_v[k, i], x) for i in range(q)])
          if q else np.zeros((x.shape[0], 0)))
    dt = sol.grid.dt
    t_k = sol.grid.nodes[k]
    h_k = sol.obstacle(t_k, x) if sol.obstacle is not None else None
    y = cond_exp.copy()
    for _ in range(sol.picard_iters):
        a = cond_exp + dt * np.asarray(sol.driver.f(t_k, x, y, z, vb), dtype=float)
        y = _resolve_penalty(a, h_k, sol.penalty_level * dt) if sol.penalty_level > 0 else a
    if sol.reflected:
        y = np.maximum(y, h_k)
    if sol.clamp_bound is not None:
        y = np.clip(y, -sol.clamp_bound, sol.clamp_bound)
    return y


def evaluate_z(sol, k, x):
    """Fitted z-field (regression representation) at (t_k, x)."""
    x = np.atleast_2d(np.asarray(x, float))
    d = sol.states.shape[2]
    return np.column_stack([sol.basis.predict(sol.coef_z[k, j], x) for j in range(d)])


def check_z_representation(sol, model, fd_step_rel=1e-3, weight=None, max_steps=None):
    """Weighted relative gap between regressed z and sigma^T grad of the field.

    The gradient of the fitted value function is taken by central differences
    of ``evaluate_u`` with step fd_step_rel * (1 + |x|); the comparison is a
    rho-weighted relative L2 norm along the paths.  Steps with degenerate
    designs are skipped; returns 0 when both sides vanish.
    """
    n = sol.n_steps
    d = sol.states.shape[2]
    steps = [k for k in range(n) if not sol.diagnostics["degenerate"][k]]
    if max_steps is not None and len(steps) > max_steps:
        steps = steps[:: max(1, len(steps) // max_steps)]
    num = 0.0
    den = 0.0
    yscale = 0.0
    for k in steps:
        xk = sol.states[k]
        h = fd_step_rel * (1.0 + np.abs(xk))
        mask = sol.basis.contains(xk) & sol.basis.contains(xk - h) & sol.basis.contains(xk + h)
        if not mask.any():
            continue
        x = xk[mask]
        grad = np.empty((x.shape[0], d))
        for j in range(d):
            step = np.zeros_like(x)
            step[:, j] = fd_step_rel * (1.0 + np.abs(x[:, j]))
            grad[:, j] = (evaluate_u(sol, k, x + step) - evaluate_u(sol, k, x - step)) \
                / (2.0 * step[:, j])
        sig = np.asarray(model.diffusion(x), dtype=float)
        zg = np.einsum("mji,mj->mi", sig, grad)
        w = weight(x) if weight is not None else np.ones(x.shape[0])
        diff = sol.z[k][mask] - zg
        num += float(np.sum(w * np.sum(diff**2, axis=1)))
        den += float(np.sum(w * np.sum(sol.z[k][mask] ** 2, axis=1)))
        yscale += float(np.sum(w * sol.y[k][mask] ** 2))
    # a z-field that is pure regression noise relative to the value scale
    # counts as zero on both sides (the constant-data convention)
    if den == 0.0 or den <= 1e-8 * yscale:
        return 0.0
    return math.sqrt(num / den)


def check_apriori_estimate(solutions, terminal, driver, weight, x_weights=None):
    """Energy-to-data ratio of the backward solution over a grid of starts.

    ``solutions`` maps starting points x0 to solutions computed from bundles
    started there.  Numerator: sup_k ||Y_k||^2 + sum_k dt (||Z_k||^2 +
    ||vbar_k||^2), with ||.||^2 the weighted quadrature over the x0 grid of
    path-mean squares.  Denominator: the same quadrature of g(x0)^2 +
    sum_k dt f(t_k, x0, 0,0,0)^2.  The useful assertion is boundedness and
    stability of the ratio across configurations, not a particular value.
    """
    items = sorted(solutions.items(), key=lambda kv: float(np.atleast_1d(kv[0])[0]))
    x0s = np.array([float(np.atleast_1d(key)[0]) for key, _ in items])
    sols = [v for _, v in items]
    if x_weights is None:
        x_weights = _trapezoid_weights(x0s)
    grid = sols[0].grid
    dt = grid.dt
    n = grid.n_steps

    rho = np.array([float(np.asarray(weight(np.atleast_2d(x))).ravel()[0]) for x in x0s])
    qw = x_weights * rho

    y_norms = np.zeros(n + 1)
    zv_sum = 0.0
    for w, sol in zip(qw, sols):
        y_norms += w * np.mean(sol.y**2, axis=1)
        zsq = np.mean(np.sum(sol.z**2, axis=2), axis=1)
        vsq = np.mean(np.sum(sol.vbar**2, axis=2), axis=1)
        zv_sum += w * dt * float(np.sum(zsq + vsq))
    numerator = float(y_norms.max()) + zv_sum

    denom = 0.0
    for w, x0 in zip(qw, x0s):
        point = np.array([[x0]]) if sols[0].states.shape[2] == 1 else np.atleast_2d(x0)
        gx = float(np.asarray(terminal(point)).ravel()[0])
        f0s = np.array([float(np.asarray(driver.f_zero(grid.nodes[k], point)).ravel()[0])
                        for k in range(n)])
        denom += w * (gx**2 + dt * float(np.sum(f0s**2)))
    if denom == 0.0:
        if numerator == 0.0:
            return 0.0
        raise ZeroDenominatorError(
            "zero data norm with nonzero solution energy; inconsistent inputs")
    return numerator / denom


def _trapezoid_weights(x):
    if x.size == 1:
        return np.ones(1)
    w = np.empty_like(x)
    w[0] = (x[1] - x[0]) / 2
    w[-1] = (x[-1] - x[-2]) / 2
    w[1:-1] = (x[2:] - x[:-2]) / 2
    return w
