"""Independent reference solvers for acceptance testing.

A 1-d finite-difference PIDE solver with optional obstacle projection
(implicit local part, explicit quadrature of the nonlocal part), the
closed-form jump-diffusion call series, and a CRR binomial tree.  None of
these share code with the Monte-Carlo pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import norm

from .errors import BoundaryError, StabilityError, TailError

__all__ = [
    "FdGrid",
    "FdSolution",
    "fd_solve_pide",
    "merton_price",
    "black_scholes",
    "binomial_american",
]


@dataclass(frozen=True)
class FdGrid:
    """Space-time grid for the finite-difference solver.

    ``bc`` selects the boundary rule: "dirichlet" holds the terminal
    condition's values at the padded ends, "linear" enforces zero curvature
    there.  ``pad_margin`` caps the padding (as a multiple of the base
    width) the jump shifts may request.
    """

    x_lo: float
    x_hi: float
    n_space: int
    n_time: int
    bc: str = "dirichlet"
    pad_margin: float = 3.0

    def __post_init__(self):
        if self.n_space < 3:
            raise ValueError("need at least 3 space nodes")
        if self.n_time < 1:
            raise ValueError("need at least 1 time step")
        if not self.x_hi > self.x_lo:
            raise ValueError("empty space interval")
        if self.bc not in ("dirichlet", "linear"):
            raise ValueError(f"unknown boundary kind {self.bc!r}")

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / (self.n_space - 1)

    @property
    def x(self):
        return np.linspace(self.x_lo, self.x_hi, self.n_space)


@dataclass
class FdSolution:
    """Backward-in-time field on the padded grid plus the base-grid view."""

    x: np.ndarray            # base grid nodes
    times: np.ndarray        # ascending, times[0] = 0
    values: np.ndarray       # (n_time+1, n_base): values[i] at times[i]
    x_padded: np.ndarray
    values_padded: np.ndarray
    diagnostics: dict

    def at_time(self, t, tol=1e-9):
        i = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
        if not (0 <= i < len(self.times)) or abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"{t} is not a time slice of the solution")
        return self.values[i]

    def interp(self, t, xq):
        return np.interp(np.asarray(xq, float), self.x, self.at_time(t))


def fd_solve_pide(model, driver, terminal, grid, obstacle=None, horizon=1.0,
                  picard_sweeps=2):
    """Solve the 1-d PIDE backward from ``horizon`` to 0 on the grid.

    Implicit drift/diffusion step (tridiagonal solve), explicit quadrature of
    the nonlocal part with linear interpolation at the shifted nodes, driver
    handled by frozen-gradient Picard sweeps; with an obstacle the field is
    projected onto {u >= h} after every step.  The grid is padded by the
    largest jump shift so shifted evaluations interpolate instead of
    extrapolate.
    """
    if model.dim != 1:
        raise ValueError("the finite-difference oracle is one dimensional")
    dt = horizon / grid.n_time
    lam = model.jump_measure.total_intensity if model.has_jumps else 0.0
    x_base = grid.x
    dx = grid.dx

    # padding so every shift from a base node lands inside the padded grid
    if model.has_jumps:
        nodes = model.jump_measure.nodes
        max_up = 0.0
        max_dn = 0.0
        for e in nodes:
            b = np.asarray(model.jump_coeff(x_base[:, None], np.full(x_base.size, e)), float)[:, 0]
            max_up = max(max_up, float(b.max(initial=0.0)))
            max_dn = max(max_dn, float((-b).max(initial=0.0)))
        width = grid.x_hi - grid.x_lo
        if max(max_up, max_dn) > grid.pad_margin * width:
            raise BoundaryError(
                f"jump shifts need padding {max(max_up, max_dn):.3g}, more than "
                f"{grid.pad_margin}x the base width {width:.3g}")
        n_lo = int(math.ceil(max_dn / dx)) + 1
        n_hi = int(math.ceil(max_up / dx)) + 1
    else:
        n_lo = n_hi = 0
    xp = np.concatenate([
        grid.x_lo - dx * np.arange(n_lo, 0, -1), x_base,
        grid.x_hi + dx * np.arange(1, n_hi + 1)])
    jp = xp.size

    a_diag = np.asarray(model.diffusion_matrix(xp[:, None]), float)[:, 0, 0]
    cfl = dt * (lam + float(np.abs(a_diag).max()) / dx**2)
    if dt * lam > 1.0:
        raise StabilityError(
            f"explicit nonlocal part unstable: dt * intensity = {dt * lam:.3g} > 1")

    # the nonlocal quadrature compensates itself (it subtracts beta . grad u),
    # so the local part uses the raw drift
    b_eff = np.asarray(model.drift(xp[:, None]), float)[:, 0]

    # tridiagonal implicit operator rows for the interior
    lower = np.zeros(jp)
    diag = np.ones(jp)
    upper = np.zeros(jp)
    interior = slice(1, jp - 1)
    ai = a_diag[interior]
    bi = b_eff[interior]
    lower[interior] = -dt * (0.5 * ai / dx**2 - 0.5 * bi / dx)
    diag[interior] = 1.0 + dt * ai / dx**2
    upper[interior] = -dt * (0.5 * ai / dx**2 + 0.5 * bi / dx)

    banded = np.zeros((3, jp))
    banded[0, 1:] = upper[:-1]
    banded[1, :] = diag
    banded[2, :-1] = lower[1:]
    full_matrix = None
    if grid.bc == "linear":
        # zero second derivative at the ends breaks the tridiagonal band;
        # fall back to one dense factorable matrix built once
        full_matrix = np.diag(diag) + np.diag(upper[:-1], 1) + np.diag(lower[1:], -1)
        full_matrix[0, :3] = [1.0, -2.0, 1.0]
        full_matrix[-1, -3:] = [1.0, -2.0, 1.0]

    # precompute shifted positions per quadrature node
    if model.has_jumps:
        q_nodes = model.jump_measure.nodes
        q_weights = model.jump_measure.weights
        shifted = np.empty((q_nodes.size, jp))
        beta_tab = np.empty((q_nodes.size, jp))
        for j, e in enumerate(q_nodes):
            b = np.asarray(model.jump_coeff(xp[:, None], np.full(jp, e)), float)[:, 0]
            beta_tab[j] = b
            shifted[j] = xp + b

    gammas = tuple(driver.functionals)
    q = len(gammas)
    if q and model.has_jumps:
        gamma_tab = np.array([[float(g(np.array([e]))[0]) if np.ndim(g(np.array([e]))) else float(g(np.array([e])))
                               for e in q_nodes] for g in gammas])
    sig_xp = np.asarray(model.diffusion(xp[:, None]), float)[:, 0, 0]

    def nonlocal_term(u):
        if not model.has_jumps:
            return np.zeros(jp), np.zeros((jp, max(1, q)))
        du = np.gradient(u, dx)
        k2 = np.zeros(jp)
        vbar = np.zeros((jp, max(1, q)))
        for j in range(q_nodes.size):
            u_shift = np.interp(shifted[j], xp, u)
            k2 += q_weights[j] * (u_shift - u - beta_tab[j] * du)
            for i in range(q):
                vbar[:, i] += q_weights[j] * gamma_tab[i, j] * (u_shift - u)
        return k2, vbar

    u = np.asarray(terminal(xp[:, None]), float).reshape(jp)
    if obstacle is not None:
        u = np.maximum(u, np.asarray(obstacle(horizon, xp[:, None]), float).reshape(jp))
    n_time = grid.n_time
    out = np.empty((n_time + 1, jp))
    out[n_time] = u
    g_ends = (u[0], u[-1])

    for step in range(n_time - 1, -1, -1):
        t_k = step * dt
        u_next = u
        u_star = u_next
        for _ in range(max(1, picard_sweeps)):
            k2, vbar = nonlocal_term(u_star)
            du = np.gradient(u_star, dx)
            z = (sig_xp * du)[:, None]
            fval = np.asarray(driver.f(t_k, xp[:, None], u_star, z, vbar), float).reshape(jp)
            rhs = u_next + dt * (k2 + fval)
            if grid.bc == "dirichlet":
                rhs[0], rhs[-1] = g_ends
                u_star = solve_banded((1, 1), banded, rhs)
            else:
                rhs[0] = 0.0
                rhs[-1] = 0.0
                u_star = np.linalg.solve(full_matrix, rhs)
        u = u_star
        if obstacle is not None:
            u = np.maximum(u, np.asarray(obstacle(t_k, xp[:, None]), float).reshape(jp))
        out[step] = u

    base = slice(n_lo, n_lo + x_base.size)
    times = np.linspace(0.0, horizon, n_time + 1)
    return FdSolution(
        x=x_base, times=times, values=out[:, base],
        x_padded=xp, values_padded=out,
        diagnostics={"cfl": cfl, "dt": dt, "dx": dx, "n_pad": (n_lo, n_hi)},
    )


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def black_scholes(s0, strike, rate, sigma, horizon, kind="call"):
    """Black-Scholes European price."""
    if horizon <= 0 or sigma <= 0:
        intrinsic = max(s0 - strike, 0.0) if kind == "call" else max(strike - s0, 0.0)
        return float(intrinsic)
    sq = sigma * math.sqrt(horizon)
    d1 = (math.log(s0 / strike) + (rate + 0.5 * sigma**2) * horizon) / sq
    d2 = d1 - sq
    if kind == "call":
        return float(s0 * norm.cdf(d1) - strike * math.exp(-rate * horizon) * norm.cdf(d2))
    return float(strike * math.exp(-rate * horizon) * norm.cdf(-d2) - s0 * norm.cdf(-d1))


def merton_price(s0, strike, rate, sigma, horizon, jump_intensity,
                 jump_mean, jump_sd, n_terms=60, kind="call", tail_tol=1e-12):
    """Jump-diffusion call/put price by the conditional-Poisson series.

    Sums Black-Scholes prices over the number of jumps with the standard
    parameter shifts.  Raises when the truncated tail is not negligible.
    """
    if n_terms < 1:
        raise ValueError("need at least one series term")
    kbar = math.exp(jump_mean + 0.5 * jump_sd**2) - 1.0
    lam_p = jump_intensity * (1.0 + kbar)
    if lam_p * horizon <= 0:
        return black_scholes(s0, strike, rate, sigma, horizon, kind)
    total = 0.0
    log_w = -lam_p * horizon
    for n in range(n_terms):
        if n > 0:
            log_w += math.log(lam_p * horizon) - math.log(n)
        w = math.exp(log_w)
        sig_n = math.sqrt(sigma**2 + n * jump_sd**2 / horizon)
        r_n = rate - jump_intensity * kbar + n * (jump_mean + 0.5 * jump_sd**2) / horizon
        total += w * black_scholes(s0, strike, r_n, sig_n, horizon, kind)
    # check the dropped tail by direct extension
    if jump_intensity > 0:
        extra = 0.0
        lw = log_w
        for n2 in range(n_terms, n_terms + 40):
            lw += math.log(lam_p * horizon) - math.log(n2)
            sig_n = math.sqrt(sigma**2 + n2 * jump_sd**2 / horizon)
            r_n = rate - jump_intensity * kbar + n2 * (jump_mean + 0.5 * jump_sd**2) / horizon
            extra += math.exp(lw) * black_scholes(s0, strike, r_n, sig_n, horizon, kind)
        if extra > tail_tol * max(1.0, abs(total)):
            raise TailError(
                f"series tail {extra:.3g} above tolerance after {n_terms} terms")
    return float(total)


def binomial_american(s0, strike, rate, sigma, horizon, steps, kind="put"):
    """Cox-Ross-Rubinstein tree with early exercise."""
    if steps < 1:
        raise ValueError("need at least one step")
    dt = horizon / steps
    if sigma <= 0:
        sigma = 1e-12
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    disc = math.exp(-rate * dt)
    p = (math.exp(rate * dt) - d) / (u - d)
    p = min(max(p, 0.0), 1.0)

    j = np.arange(steps + 1)
    prices = s0 * u**j * d ** (steps - j)
    if kind == "call":
        payoff = lambda s: np.maximum(s - strike, 0.0)
    elif kind == "put":
        payoff = lambda s: np.maximum(strike - s, 0.0)
    else:
        raise ValueError("kind must be 'call' or 'put'")
    values = payoff(prices)
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[1:i + 2] + (1 - p) * values[:i + 1])
        j = np.arange(i + 1)
        prices = s0 * u**j * d ** (i - j)
        values = np.maximum(values, payoff(prices))
    return float(values[0])


def binomial_european(s0, strike, rate, sigma, horizon, steps, kind="put"):
    """Same tree without early exercise (for the r = 0 equivalence check)."""
    dt = horizon / steps
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    disc = math.exp(-rate * dt)
    p = (math.exp(rate * dt) - d) / (u - d)
    j = np.arange(steps + 1)
    prices = s0 * u**j * d ** (steps - j)
    values = np.maximum(strike - prices, 0.0) if kind == "put" else np.maximum(prices - strike, 0.0)
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[1:i + 2] + (1 - p) * values[:i + 1])
    return float(values[0])
