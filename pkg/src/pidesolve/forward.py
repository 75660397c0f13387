"""Forward simulation of the jump diffusion.

Euler stepping between jump times with exact jump insertion: per step the
number of jumps is Poisson, jump times are uniform in the step, marks are
iid from the measure's sampler, and the compensator drift is applied
continuously between events.  Noise for step ``k`` comes from a dedicated
counter-based stream keyed by ``(seed, k + key_offset)``, so a simulation
restarted at an interior node with the matching key offset replays the same
randomness bit for bit; the flow-composition check exploits exactly this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GridError, NumericError

__all__ = [
    "TimeGrid",
    "PathBundle",
    "simulate_paths",
    "check_flow_property",
    "moment_report",
    "MomentReport",
    "tangent_flow",
    "TangentFlowReport",
    "dump_paths_csv",
    "dump_paths_binary",
]

_KEY_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = t0 + k * dt, k = 0..n_steps."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        if not self.t1 > self.t0:
            raise ValueError("grid must be strictly increasing")

    @property
    def dt(self):
        return (self.t1 - self.t0) / self.n_steps

    @property
    def nodes(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def node_index(self, t, tol=1e-9):
        """Index of t among the nodes, or GridError if t is not a node."""
        k = (t - self.t0) / self.dt
        kr = round(k)
        if abs(k - kr) > tol * max(1.0, abs(k)) or not 0 <= kr <= self.n_steps:
            raise GridError(f"time {t} is not a node of the grid")
        return int(kr)


@dataclass
class PathBundle:
    """Simulated forward paths plus the increments backward passes need.

    ``states`` has shape (n_steps+1, n_paths, dim), ``brownian`` the per-step
    Brownian increments (n_steps, n_paths, dim).  Jumps are stored per step
    as parallel arrays (owning path index, absolute time, mark), sorted by
    path then time.  ``dmu`` holds precomputed compensated functional
    increments, shape (q, n_steps, n_paths), when functionals were supplied
    at simulation time.
    """

    grid: TimeGrid
    states: np.ndarray
    brownian: np.ndarray
    jump_counts: np.ndarray
    jump_paths: tuple
    jump_times: tuple
    jump_marks: tuple
    seed: int
    key_offset: int = 0
    dmu: Optional[np.ndarray] = None

    @property
    def n_paths(self):
        return self.states.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    def total_jumps_per_path(self):
        return self.jump_counts.sum(axis=0)

    def compensated_increments(self, functionals, jump_measure):
        """Per-step compensated jump functional increments, shape (q, N, M).

        Entry (i, k, p) is sum over the step's jumps of gamma_i(mark) minus
        dt times the quadrature of gamma_i against the measure.
        """
        functionals = tuple(functionals)
        q = len(functionals)
        n, m = self.jump_counts.shape
        out = np.zeros((q, n, m))
        if q == 0:
            return out
        dt = self.grid.dt
        comp = np.array([jump_measure.integrate(g) for g in functionals])
        for k in range(n):
            marks = self.jump_marks[k]
            paths = self.jump_paths[k]
            for i, gamma in enumerate(functionals):
                out[i, k, :] = -dt * comp[i]
                if marks.size:
                    np.add.at(out[i, k], paths, np.asarray(gamma(marks), dtype=float))
        return out


def _step_stream(seed, key):
    bits = np.array([seed & _KEY_MASK, key & _KEY_MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=bits))


def _drift_jacobian(model, x):
    if model.drift_jac is not None:
        return np.asarray(model.drift_jac(x), dtype=float)
    return _fd_jacobian(lambda xx: np.asarray(model.drift(xx), dtype=float), x)


def _diffusion_jacobian(model, x):
    # returns (..., d, d, d): entry [i, j, k] = d sigma^{ij} / d x_k
    if model.diffusion_jac is not None:
        return np.asarray(model.diffusion_jac(x), dtype=float)
    d = x.shape[-1]
    out = np.empty(x.shape[:-1] + (d, d, d))
    for k in range(d):
        h = 1e-5 * (1.0 + np.abs(x[..., k]))
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        out[..., :, :, k] = (
            np.asarray(model.diffusion(xp), dtype=float)
            - np.asarray(model.diffusion(xm), dtype=float)
        ) / (2.0 * h)[..., None, None]
    return out


def _jump_jacobian(model, x, e):
    if model.jump_coeff_jac is not None:
        return np.asarray(model.jump_coeff_jac(x, e), dtype=float)
    return _fd_jacobian(lambda xx: np.asarray(model.jump_coeff(xx, e), dtype=float), x)


def _fd_jacobian(fn, x):
    d = x.shape[-1]
    out = np.empty(x.shape[:-1] + (d, d))
    for k in range(d):
        h = 1e-5 * (1.0 + np.abs(x[..., k]))
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        out[..., :, k] = (fn(xp) - fn(xm)) / (2.0 * h)[..., None]
    return out


def _compensator_jacobian(model, x):
    if not model.has_jumps:
        return np.zeros(x.shape[:-1] + (x.shape[-1], x.shape[-1]))
    nodes = model.jump_measure.nodes
    weights = model.jump_measure.weights
    out = np.zeros(x.shape[:-1] + (x.shape[-1], x.shape[-1]))
    for e_j, w_j in zip(nodes, weights):
        marks = np.full(x.shape[:-1], e_j)
        out += w_j * _jump_jacobian(model, x, marks)
    return out


def _euler_segment(model, x, tau, xi, tangent):
    """One diffusion segment: state update, Brownian increment, tangent update.

    ``tau`` is (g, 1), ``xi`` standard normal (g, d).  The effective drift is
    drift minus the compensator drift of the jump part.
    """
    dw = np.sqrt(tau) * xi
    b = np.asarray(model.drift(x), dtype=float) - model.compensator_drift(x)
    sig = np.asarray(model.diffusion(x), dtype=float)
    new_x = x + b * tau + np.einsum("gij,gj->gi", sig, dw)
    new_tangent = None
    if tangent is not None:
        d = x.shape[-1]
        amat = np.broadcast_to(np.eye(d), tangent.shape).copy()
        jb = _drift_jacobian(model, x) - _compensator_jacobian(model, x)
        amat += jb * tau[..., None]
        dsig = _diffusion_jacobian(model, x)
        amat += np.einsum("gijk,gj->gik", dsig, dw)
        new_tangent = amat @ tangent
    return new_x, dw, new_tangent


def _advance(model, x, dt, rng, tangent):
    """Advance all paths over one step of length dt.

    Returns (new_x, dW, counts, jump_paths, jump_offsets, jump_marks,
    new_tangent).  Draw order is fixed: Poisson counts, jump time offsets,
    marks, then one standard normal block per diffusion segment laid out in
    path-major order.
    """
    m, d = x.shape
    lam = model.jump_measure.total_intensity if model.has_jumps else 0.0
    if lam > 0:
        counts = rng.poisson(lam * dt, m)
    else:
        counts = np.zeros(m, dtype=np.int64)
    total = int(counts.sum())
    if total:
        offsets = rng.random(total) * dt
        marks = np.asarray(model.jump_measure.mark_sampler(rng, total), dtype=float)
    else:
        offsets = np.empty(0)
        marks = np.empty(0)
    normals = rng.standard_normal((m + total, d))

    jump_start = np.concatenate(([0], np.cumsum(counts)[:-1]))
    seg_start = np.arange(m) + jump_start

    new_x = np.empty_like(x)
    dW = np.zeros((m, d))
    new_tangent = tangent.copy() if tangent is not None else None
    sorted_offsets = offsets.copy()
    sorted_marks = marks.copy()

    for c in np.unique(counts):
        idx = np.nonzero(counts == c)[0]
        g = idx.size
        if c == 0:
            xi = normals[seg_start[idx]]
            tau = np.full((g, 1), dt)
            tan = new_tangent[idx] if tangent is not None else None
            nx, dw, tan = _euler_segment(model, x[idx], tau, xi, tan)
            new_x[idx] = nx
            dW[idx] = dw
            if tangent is not None:
                new_tangent[idx] = tan
            continue
        jcols = jump_start[idx][:, None] + np.arange(c)
        times = offsets[jcols]
        order = np.argsort(times, axis=1)
        times = np.take_along_axis(times, order, axis=1)
        mk = np.take_along_axis(marks[jcols], order, axis=1)
        sorted_offsets[jcols.ravel()] = times.ravel()
        sorted_marks[jcols.ravel()] = mk.ravel()
        bounds = np.concatenate([np.zeros((g, 1)), times, np.full((g, 1), dt)], axis=1)
        seg_len = np.diff(bounds, axis=1)
        xi_rows = normals[seg_start[idx][:, None] + np.arange(c + 1)]
        cur = x[idx]
        tan = new_tangent[idx] if tangent is not None else None
        for s in range(c + 1):
            tau = np.maximum(seg_len[:, s][:, None], 0.0)
            cur, dw, tan = _euler_segment(model, cur, tau, xi_rows[:, s, :], tan)
            dW[idx] += dw
            if s < c:
                e_s = mk[:, s]
                if tangent is not None:
                    tan = (np.eye(d)[None] + _jump_jacobian(model, cur, e_s)) @ tan
                cur = cur + np.asarray(model.jump_coeff(cur, e_s), dtype=float)
        new_x[idx] = cur
        if tangent is not None:
            new_tangent[idx] = tan

    jump_paths = np.repeat(np.arange(m), counts)
    return new_x, dW, counts, jump_paths, sorted_offsets, sorted_marks, new_tangent


def _as_start(x0, n_paths, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if x0.ndim == 1:
        if x0.size != dim:
            raise ValueError(f"starting point has dim {x0.size}, model dim {dim}")
        return np.broadcast_to(x0, (n_paths, dim)).copy()
    if x0.shape != (n_paths, dim):
        raise ValueError("per-path starts must have shape (n_paths, dim)")
    return x0.copy()


def _simulate(model, grid, x0, n_paths, seed, key_offset, functionals, with_tangent):
    if n_paths < 1:
        raise ValueError("need at least one path")
    dt = grid.dt
    x = _as_start(x0, n_paths, model.dim)
    n = grid.n_steps
    states = np.empty((n + 1, n_paths, model.dim))
    states[0] = x
    brownian = np.empty((n, n_paths, model.dim))
    counts_all = np.empty((n, n_paths), dtype=np.int64)
    jp, jt, jm = [], [], []
    tangent = np.broadcast_to(np.eye(model.dim), (n_paths, model.dim, model.dim)).copy() \
        if with_tangent else None

    for k in range(n):
        rng = _step_stream(seed, k + key_offset)
        x, dw, counts, paths_k, offs_k, marks_k, tangent = _advance(model, x, dt, rng, tangent)
        if not np.isfinite(x).all():
            bad = np.argwhere(~np.isfinite(x))
            p, comp = bad[0]
            raise NumericError(f"non-finite state at step {k + 1}, path {p} "
                               f"(component {comp})")
        states[k + 1] = x
        brownian[k] = dw
        counts_all[k] = counts
        jp.append(paths_k)
        jt.append(grid.t0 + k * dt + offs_k)
        jm.append(marks_k)

    bundle = PathBundle(
        grid=grid, states=states, brownian=brownian, jump_counts=counts_all,
        jump_paths=tuple(jp), jump_times=tuple(jt), jump_marks=tuple(jm),
        seed=seed, key_offset=key_offset,
    )
    if functionals:
        bundle.dmu = bundle.compensated_increments(functionals, model.jump_measure)
    return bundle, tangent


def simulate_paths(model, grid, x0, n_paths, seed, functionals=(), key_offset=0):
    """Simulate the forward jump diffusion on the grid.

    ``x0`` is a point (all paths start there) or an (n_paths, dim) array of
    per-path starts for dispersed-start experiments.  Identical
    (model, grid, x0, n_paths, seed, key_offset) give a bit-identical bundle.
    """
    bundle, _ = _simulate(model, grid, x0, n_paths, seed, key_offset, functionals, False)
    return bundle


def check_flow_property(model, t, s, r, x0, n_paths, seed, n_steps):
    """Max pathwise gap between X_{t,r}(x) and the composition through s.

    Both simulations share noise through the per-step key streams; on an
    aligned grid the discrepancy is zero up to floating point.
    """
    if not t < s < r:
        raise ValueError("need t < s < r")
    grid_tr = TimeGrid(t, r, n_steps)
    m = grid_tr.node_index(s)
    if m == 0 or m == n_steps:
        raise GridError("s must be an interior node shared by both sub-grids")
    direct = simulate_paths(model, grid_tr, x0, n_paths, seed)
    leg1 = simulate_paths(model, TimeGrid(t, s, m), x0, n_paths, seed)
    leg2 = simulate_paths(model, TimeGrid(s, r, n_steps - m), leg1.states[-1],
                          n_paths, seed, key_offset=m)
    gap = np.abs(leg2.states[-1] - direct.states[-1])
    return float(gap.max())


@dataclass(frozen=True)
class MomentReport:
    ratio: float
    stderr: float


def moment_report(bundle, x0, p, n_boot=200, boot_seed=0):
    """Empirical ratio E[sup_k |X_k - x0|^p] / ((t1 - t0) (1 + |x0|^p)).

    Bootstrap standard error over paths.  Certifies the uniform moment bound
    of the flow when scanned over starting points.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dev = np.linalg.norm(bundle.states - x0[None, None, :], axis=2)
    sup_p = dev.max(axis=0) ** p
    denom = (bundle.grid.t1 - bundle.grid.t0) * (1.0 + np.linalg.norm(x0) ** p)
    ratio = float(sup_p.mean() / denom)
    rng = np.random.Generator(np.random.Philox(key=np.array([boot_seed, 0xB0507], dtype=np.uint64)))
    m = sup_p.size
    idx = rng.integers(0, m, size=(n_boot, m))
    boots = sup_p[idx].mean(axis=1) / denom
    return MomentReport(ratio=ratio, stderr=float(boots.std(ddof=1)))


@dataclass(frozen=True)
class TangentFlowReport:
    mean_det: float
    stderr: float
    determinants: np.ndarray


def tangent_flow(model, grid, x0, n_paths, seed):
    """Simulate the linearized flow alongside the state and report det stats.

    The tangent alternates the Jacobian of the Euler map between jumps (the
    derivative of the effective drift includes the compensator term) and
    I + d beta/dx at jumps.  Returns mean and standard error of
    det(dX_{t0,t1}) over paths.
    """
    _, tangent = _simulate(model, grid, x0, n_paths, seed, 0, (), True)
    if not np.isfinite(tangent).all():
        raise NumericError("non-finite tangent flow")
    dets = np.linalg.det(tangent)
    se = float(dets.std(ddof=1) / math.sqrt(dets.size)) if dets.size > 1 else 0.0
    return TangentFlowReport(mean_det=float(dets.mean()), stderr=se, determinants=dets)


# ---------------------------------------------------------------------------
# path dumps
# ---------------------------------------------------------------------------

def dump_paths_csv(bundle, path):
    """Write paths as CSV rows (path, step, time, x[0..d-1], n_jumps)."""
    n1, m, d = bundle.states.shape
    times = bundle.grid.nodes
    counts = np.vstack([np.zeros((1, m), dtype=np.int64), bundle.jump_counts])
    with open(path, "w") as fh:
        cols = ",".join(f"x{i}" for i in range(d))
        fh.write(f"path,step,time,{cols},n_jumps\n")
        for pth in range(m):
            for k in range(n1):
                xs = ",".join(f"{v:.17g}" for v in bundle.states[k, pth])
                fh.write(f"{pth},{k},{times[k]:.17g},{xs},{counts[k, pth]}\n")


_BIN_MAGIC = b"PIDE1"


def dump_paths_binary(bundle, path):
    """Binary path dump, little endian.

    Layout: 5-byte magic ``PIDE1``; three uint32 (n_times, n_paths, dim);
    n_times float64 node times; then the state array in C order
    (n_times, n_paths, dim) as float64.
    """
    n1, m, d = bundle.states.shape
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        np.array([n1, m, d], dtype="<u4").tofile(fh)
        bundle.grid.nodes.astype("<f8").tofile(fh)
        bundle.states.astype("<f8").tofile(fh)


def load_paths_binary(path):
    """Read a binary dump produced by dump_paths_binary."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _BIN_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        n1, m, d = np.fromfile(fh, dtype="<u4", count=3)
        times = np.fromfile(fh, dtype="<f8", count=int(n1))
        states = np.fromfile(fh, dtype="<f8", count=int(n1 * m * d))
    return times, states.reshape(int(n1), int(m), int(d))
