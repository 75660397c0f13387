"""Empirical equivalence-of-norms checks.

Compares the weighted integral of E|phi(X_{t,s}(x))| over starting points
against the weighted integral of |phi| itself, for a family of test
functions and several horizons.  The outer integral is a deterministic
Gauss-Legendre panel quadrature; the inner expectation is Monte Carlo on a
single dispersed-start simulation, so all horizons share one set of paths.
Two-sided boundedness of these ratios is the bridge between path-space and
weighted-Sobolev estimates; the artifact can only certify it empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import QuadratureError
from .forward import TimeGrid, simulate_paths

__all__ = [
    "XQuadrature",
    "gauss_legendre_panels",
    "NormRatioReport",
    "norm_ratio",
    "spacetime_norm_ratio",
    "shipped_phi_family",
]


@dataclass(frozen=True)
class XQuadrature:
    """Deterministic quadrature over starting points (1-d)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, float)
        weights = np.asarray(self.weights, float)
        if nodes.shape != weights.shape or nodes.ndim != 1 or not nodes.size:
            raise ValueError("nodes and weights must be equal-length 1-d arrays")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self):
        return self.nodes.size


def gauss_legendre_panels(radius, n_panels=16, nodes_per_panel=8):
    """Composite Gauss-Legendre rule on [-radius, radius]."""
    x, w = np.polynomial.legendre.leggauss(nodes_per_panel)
    edges = np.linspace(-radius, radius, n_panels + 1)
    nodes = []
    weights = []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
    return XQuadrature(np.concatenate(nodes), np.concatenate(weights))


@dataclass(frozen=True)
class NormRatioReport:
    """Rows (phi_id, s, ratio, stderr) plus the family-wide extremes."""

    rows: tuple

    @property
    def ratios(self):
        return np.array([r[2] for r in self.rows])

    @property
    def min_ratio(self):
        return float(self.ratios.min())

    @property
    def max_ratio(self):
        return float(self.ratios.max())

    def bracket(self):
        return self.min_ratio, self.max_ratio


def _grid_containing(t, s_list, max_steps=4000):
    """Smallest uniform grid from t whose nodes contain every s."""
    fracs = [Fraction(s - t).limit_denominator(10**6) for s in s_list]
    denom = 1
    for f in fracs:
        denom = denom * f.denominator // math.gcd(denom, f.denominator)
    smax = max(s_list)
    n = int(round((smax - t) * denom))
    while n > max_steps and n % 2 == 0:
        n //= 2
        denom //= 2
    if n < 1:
        raise ValueError("horizons collapse onto the start time")
    return TimeGrid(t, smax, n)


def _tail_check(fn, weight, quad, label):
    """Flag integrals whose tail beyond the quadrature range is material."""
    radius = float(np.abs(quad.nodes).max())
    ext = gauss_legendre_panels(1.5 * radius, n_panels=12, nodes_per_panel=8)
    outer = np.abs(ext.nodes) > radius
    vals_out = np.abs(fn(ext.nodes[outer])) * weight(ext.nodes[outer, None])
    tail = float(np.sum(ext.weights[outer] * vals_out))
    base = float(np.sum(quad.weights * weight(quad.nodes[:, None])
                        * np.abs(fn(quad.nodes))))
    if base <= 0 or tail > 0.01 * base:
        raise QuadratureError(
            f"{label}: quadrature tail {tail:.3g} above 1% of the integral {base:.3g}")
    return base


def _node_means(vals):
    """Per-node path averages; exact when all path values at a node coincide."""
    mean = vals.mean(axis=1)
    same = np.ptp(vals, axis=1) == 0.0
    mean[same] = vals[same, 0]
    return mean


def norm_ratio(model, weight, phi_family, t, s_list, x_quadrature, n_paths, seed):
    """Ratios of E-composed to plain weighted L1 norms for each (phi, s).

    One simulation serves every horizon: paths start from the quadrature
    nodes (n_paths split evenly across nodes) and are read off at each s.
    The zero model gives ratio exactly 1 for every phi by construction.
    """
    if model.dim != 1:
        raise ValueError("norm checks are implemented for 1-d models")
    quad = x_quadrature
    m_per = n_paths // quad.size
    if m_per < 2:
        raise ValueError(f"need at least 2 paths per quadrature node, "
                         f"got {n_paths} paths for {quad.size} nodes")
    grid = _grid_containing(t, list(s_list))
    x0 = np.repeat(quad.nodes, m_per)[:, None]
    bundle = simulate_paths(model, grid, x0, quad.size * m_per, seed)
    rho = weight(quad.nodes[:, None])

    rows = []
    for pid, phi in phi_family:
        denom = _tail_check(phi, weight, quad, pid)
        for s in s_list:
            k = grid.node_index(s)
            vals = np.abs(phi(bundle.states[k][:, 0])).reshape(quad.size, m_per)
            node_mean = _node_means(vals)
            node_var = vals.var(axis=1, ddof=1)
            num = float(np.sum(quad.weights * rho * node_mean))
            se = math.sqrt(float(np.sum((quad.weights * rho) ** 2 * node_var / m_per)))
            rows.append((pid, float(s), num / denom, se / denom))
    return NormRatioReport(rows=tuple(rows))


def spacetime_norm_ratio(model, weight, psi_family, t, horizon, x_quadrature,
                         n_paths, seed, n_steps=20):
    """Space-time variant: trapezoid over the simulation grid in time.

    For time-independent integrands this reproduces the weighted time
    average of the per-horizon ratios exactly (same paths, same rule).
    """
    if model.dim != 1:
        raise ValueError("norm checks are implemented for 1-d models")
    quad = x_quadrature
    m_per = n_paths // quad.size
    if m_per < 2:
        raise ValueError("need at least 2 paths per quadrature node")
    grid = TimeGrid(t, horizon, n_steps)
    x0 = np.repeat(quad.nodes, m_per)[:, None]
    bundle = simulate_paths(model, grid, x0, quad.size * m_per, seed)
    rho = weight(quad.nodes[:, None])
    wt = np.full(n_steps + 1, grid.dt)
    wt[0] *= 0.5
    wt[-1] *= 0.5

    rows = []
    for pid, psi in psi_family:
        num = 0.0
        den = 0.0
        var_acc = 0.0
        for k, s in enumerate(grid.nodes):
            vals = np.abs(psi(s, bundle.states[k][:, 0])).reshape(quad.size, m_per)
            node_mean = _node_means(vals)
            node_var = vals.var(axis=1, ddof=1)
            num += wt[k] * float(np.sum(quad.weights * rho * node_mean))
            var_acc += wt[k] ** 2 * float(np.sum((quad.weights * rho) ** 2 * node_var / m_per))
            den += wt[k] * float(np.sum(quad.weights * rho * np.abs(psi(s, quad.nodes))))
        if den <= 0:
            raise QuadratureError(f"{pid}: vanishing reference integral")
        rows.append((pid, float(horizon), num / den, math.sqrt(var_acc) / den))
    return NormRatioReport(rows=tuple(rows))


def shipped_phi_family():
    """Mixed smooth and rough test functions probing both regularity regimes."""

    def indicator(lo, hi):
        return lambda x: ((x >= lo) & (x <= hi)).astype(float)

    fam = [
        ("box[-1,1]", indicator(-1.0, 1.0)),
        ("box[0,2]", indicator(0.0, 2.0)),
        ("gauss", lambda x: np.exp(-x**2)),
        ("gauss-wide", lambda x: np.exp(-0.25 * x**2)),
        ("x1-gauss", lambda x: np.abs(x) * np.exp(-x**2)),
        ("x2-gauss", lambda x: x**2 * np.exp(-x**2)),
        ("step-mix", lambda x: (0.5 + (x > 0)) * ((np.abs(x) <= 1.5).astype(float))),
    ]
    return fam
