"""Problem data for the PIDE solver.

Declares the coefficients of the state dynamics (drift, diffusion, jump
coefficient, finite-activity jump measure), the nonlinear driver, terminal
condition, obstacle and weight function, together with validation helpers
for the structural assumptions they must satisfy.  Also evaluates the two
pieces of the integro-differential generator and the strong-form PIDE
residual used by the diagnostic checks.

Vectorization contract: all user-supplied coefficient callables accept
batched inputs.  For a model of dimension ``d``:

* ``drift(x)``      : ``(..., d) -> (..., d)``
* ``diffusion(x)``  : ``(..., d) -> (..., d, d)``
* ``jump_coeff(x, e)``: ``(..., d), (...,) -> (..., d)`` (scalar marks)

``scalar_model`` wraps plain one-dimensional callables into this form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericError, QuadratureError

__all__ = [
    "JumpMeasure",
    "ModelSpec",
    "DriverSpec",
    "TerminalSpec",
    "ObstacleSpec",
    "WeightFunction",
    "JumpMapReport",
    "scalar_model",
    "named_model",
    "generator_local",
    "generator_jump",
    "pide_residual",
    "check_jump_map",
    "fd_step",
    "numerical_gradient",
    "numerical_hessian",
]


# ---------------------------------------------------------------------------
# jump measure
# ---------------------------------------------------------------------------

def _empty_sampler(rng, n):
    if n:
        raise ValueError("measure has zero intensity, cannot draw marks")
    return np.empty(0)


@dataclass(frozen=True)
class JumpMeasure:
    """Finite-activity mark measure with sampler and matching quadrature.

    ``total_intensity`` is the expected number of jumps per unit time.
    ``mark_sampler(rng, n)`` draws ``n`` iid marks.  ``nodes``/``weights``
    approximate integrals against the measure; the weights are nonnegative
    and sum to the intensity.  Marks are scalar.
    """

    total_intensity: float
    mark_sampler: Callable = _empty_sampler
    nodes: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        lam = float(self.total_intensity)
        if not math.isfinite(lam) or lam < 0:
            raise ValueError("total intensity must be finite and >= 0")
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if np.any(weights < 0):
            raise ValueError("quadrature weights must be nonnegative")
        small = np.sum(weights * np.minimum(1.0, nodes**2))
        if not math.isfinite(small):
            raise ValueError("sum of w * (1 ^ |e|^2) must be finite")
        if weights.size and abs(weights.sum() - lam) > 1e-8 * max(1.0, lam):
            raise ValueError("quadrature weights must sum to the total intensity")
        if lam > 0 and weights.size == 0:
            raise ValueError("positive intensity requires a nonempty quadrature")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "total_intensity", lam)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def is_active(self):
        return self.total_intensity > 0 and self.nodes.size > 0

    def integrate(self, f):
        """Quadrature of ``f`` against the measure: sum_j w_j f(e_j)."""
        if not self.nodes.size:
            return 0.0
        return float(np.sum(self.weights * np.asarray(f(self.nodes), dtype=float)))

    def mean_mark(self):
        if not self.is_active:
            return 0.0
        return float(np.sum(self.weights * self.nodes) / self.total_intensity)

    def second_moment(self):
        if not self.is_active:
            return 0.0
        return float(np.sum(self.weights * self.nodes**2) / self.total_intensity)

    def sampler_moment_gap(self, rng, n=200_000):
        """Monte-Carlo check of the sampler against the quadrature moments.

        Returns the largest z-score of (sample mean, sample second moment)
        against the quadrature values.  Large values flag a mismatch.
        """
        if not self.is_active:
            return 0.0
        marks = np.asarray(self.mark_sampler(rng, n), dtype=float)
        m1, m2 = self.mean_mark(), self.second_moment()
        z1 = abs(marks.mean() - m1) / (marks.std(ddof=1) / math.sqrt(n) + 1e-300)
        sq = marks**2
        z2 = abs(sq.mean() - m2) / (sq.std(ddof=1) / math.sqrt(n) + 1e-300)
        return float(max(z1, z2))

    # -- built-in constructors ------------------------------------------------

    @classmethod
    def none(cls):
        """Measure with zero intensity (no jumps)."""
        return cls(0.0)

    @classmethod
    def uniform(cls, lo=-1.0, hi=1.0, intensity=1.0, n_nodes=32):
        """Marks uniform on [lo, hi]; Gauss-Legendre quadrature."""
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        nodes = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        weights = intensity * w / 2.0

        def sampler(rng, n, _lo=lo, _hi=hi):
            return rng.uniform(_lo, _hi, n)

        return cls(intensity, sampler, nodes, weights)

    @classmethod
    def gaussian(cls, mean=0.0, sd=1.0, intensity=1.0, n_nodes=32):
        """Normally distributed marks; Gauss-Hermite quadrature."""
        x, w = np.polynomial.hermite.hermgauss(n_nodes)
        nodes = mean + math.sqrt(2.0) * sd * x
        weights = intensity * w / math.sqrt(math.pi)

        def sampler(rng, n, _m=mean, _s=sd):
            return rng.normal(_m, _s, n)

        return cls(intensity, sampler, nodes, weights)

    @classmethod
    def two_point(cls, down=-0.1, up=0.1, p_up=0.5, intensity=1.0):
        """Two-atom mark distribution (Kou-like up/down moves)."""
        if not 0.0 <= p_up <= 1.0:
            raise ValueError("p_up must lie in [0, 1]")
        nodes = np.array([down, up])
        weights = intensity * np.array([1.0 - p_up, p_up])

        def sampler(rng, n, _d=down, _u=up, _p=p_up):
            return np.where(rng.random(n) < _p, _u, _d)

        return cls(intensity, sampler, nodes, weights)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """State dynamics: drift, diffusion, jump coefficient and jump measure.

    ``k_jump`` is the user-declared bound in |beta(x, e)| <= k_jump * (1 ^ |e|)
    and ``k_coef`` a joint Lipschitz/growth constant for (drift, diffusion);
    both are spot-checked, not proven.  Optional analytic Jacobians
    (``drift_jac``, ``diffusion_jac``, ``jump_coeff_jac``) are used by the
    tangent-flow simulation when present; central finite differences
    otherwise.
    """

    dim: int
    drift: Callable
    diffusion: Callable
    jump_coeff: Optional[Callable] = None
    jump_measure: JumpMeasure = field(default_factory=JumpMeasure.none)
    k_jump: float = 1.0
    k_coef: float = 1.0
    drift_jac: Optional[Callable] = None
    diffusion_jac: Optional[Callable] = None
    jump_coeff_jac: Optional[Callable] = None
    sample_box: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.k_jump <= 0 or self.k_coef <= 0:
            raise ValueError("declared constants must be positive")
        if self.jump_measure.is_active and self.jump_coeff is None:
            raise ValueError("active jump measure requires a jump coefficient")

    @property
    def has_jumps(self):
        return self.jump_measure.is_active and self.jump_coeff is not None

    def diffusion_matrix(self, x):
        """a = sigma sigma^T at x, shape (..., d, d)."""
        sig = np.asarray(self.diffusion(x), dtype=float)
        return sig @ np.swapaxes(sig, -1, -2)

    def compensator_drift(self, x):
        """Quadrature of the jump coefficient: sum_j w_j beta(x, e_j).

        This is the drift the simulator subtracts between jumps so that the
        jump part is integrated against the compensated measure.
        """
        x = np.asarray(x, dtype=float)
        if not self.has_jumps:
            return np.zeros_like(x)
        nodes = self.jump_measure.nodes
        weights = self.jump_measure.weights
        out = np.zeros_like(x)
        for e_j, w_j in zip(nodes, weights):
            out = out + w_j * np.asarray(self.jump_coeff(x, np.full(x.shape[:-1], e_j)))
        return out

    def spot_check_jump_bound(self, rng, n=256):
        """Max of |beta(x,e)| / (k_jump * (1 ^ |e|)) over sampled (x, e).

        Values <= 1 are consistent with the declared bound; the check samples
        x from ``sample_box`` and marks from the measure's sampler.
        """
        if not self.has_jumps:
            return 0.0
        lo, hi = self.sample_box
        x = rng.uniform(lo, hi, size=(n, self.dim))
        e = np.asarray(self.jump_measure.mark_sampler(rng, n), dtype=float)
        beta = np.asarray(self.jump_coeff(x, e), dtype=float)
        denom = self.k_jump * np.minimum(1.0, np.abs(e))
        denom = np.maximum(denom, 1e-300)
        return float(np.max(np.linalg.norm(beta, axis=-1) / denom))


def scalar_model(drift, diffusion, jump=None, jump_measure=None, **kw):
    """Build a 1-d ModelSpec from plain scalar callables.

    ``drift`` and ``diffusion`` map a batch ``(m,)`` of states to ``(m,)``
    values; ``jump(x, e)`` maps batched states and marks to displacements.
    """
    jm = jump_measure if jump_measure is not None else JumpMeasure.none()

    def _drift(x, _f=drift):
        x = np.asarray(x, dtype=float)
        return np.asarray(_f(x[..., 0]), dtype=float)[..., None]

    def _diff(x, _f=diffusion):
        x = np.asarray(x, dtype=float)
        return np.asarray(_f(x[..., 0]), dtype=float)[..., None, None]

    _jump = None
    if jump is not None:
        def _jump(x, e, _f=jump):
            x = np.asarray(x, dtype=float)
            return np.asarray(_f(x[..., 0], np.asarray(e, dtype=float)), dtype=float)[..., None]

    return ModelSpec(dim=1, drift=_drift, diffusion=_diff, jump_coeff=_jump,
                     jump_measure=jm, **kw)


def named_model(name, **params):
    """Built-in model presets selectable by string key.

    * ``"bs"``          geometric Brownian motion in price space.
    * ``"merton"``      risk-neutral jump diffusion in log-price space with
                        normal jump sizes; translation jumps keep the scheme
                        exact in distribution.
    * ``"kou"``         log-price dynamics with two-point jump sizes.
    * ``"toy-uniform"`` unit diffusion plus translation jumps with marks
                        uniform on [-1, 1] at unit intensity.
    """
    name = name.lower()
    if name == "bs":
        r = params.pop("r", 0.05)
        sigma = params.pop("sigma", 0.2)
        _reject_extra(params, name)
        return scalar_model(
            drift=lambda x: r * x,
            diffusion=lambda x: sigma * x,
            k_coef=max(abs(r), sigma, 1e-6),
            drift_jac=_const_jac_1d(r),
            diffusion_jac=_const_dsig_1d(sigma),
            sample_box=(1.0, 200.0),
        )
    if name in ("merton", "kou"):
        r = params.pop("r", 0.05)
        sigma = params.pop("sigma", 0.2)
        intensity = params.pop("intensity", 1.0)
        n_nodes = params.pop("n_nodes", 32)
        if name == "merton":
            jump_mean = params.pop("jump_mean", -0.1)
            jump_sd = params.pop("jump_sd", 0.15)
            jm = JumpMeasure.gaussian(jump_mean, jump_sd, intensity, n_nodes)
            kbar = math.exp(jump_mean + 0.5 * jump_sd**2) - 1.0
            mbar = jump_mean
        else:
            down = params.pop("down", -0.1)
            up = params.pop("up", 0.1)
            p_up = params.pop("p_up", 0.5)
            jm = JumpMeasure.two_point(down, up, p_up, intensity)
            kbar = (1 - p_up) * (math.exp(down) - 1) + p_up * (math.exp(up) - 1)
            mbar = (1 - p_up) * down + p_up * up
        _reject_extra(params, name)
        # log-price drift chosen so the compensated dynamics reproduce the
        # risk-neutral process: effective drift = r - sigma^2/2 - lambda*kbar
        b = r - 0.5 * sigma**2 - intensity * kbar + intensity * mbar
        return scalar_model(
            drift=lambda x: np.full_like(x, b),
            diffusion=lambda x: np.full_like(x, sigma),
            jump=lambda x, e: np.broadcast_to(e, x.shape).astype(float),
            jump_measure=jm,
            k_jump=4.0,
            k_coef=max(abs(b), sigma, 1e-6),
            drift_jac=_const_jac_1d(0.0),
            diffusion_jac=_const_dsig_1d(0.0),
            jump_coeff_jac=_zero_jump_jac_1d(),
            sample_box=(2.0, 7.0),
        )
    if name == "toy-uniform":
        intensity = params.pop("intensity", 1.0)
        half_width = params.pop("half_width", 1.0)
        n_nodes = params.pop("n_nodes", 32)
        _reject_extra(params, name)
        jm = JumpMeasure.uniform(-half_width, half_width, intensity, n_nodes)
        return scalar_model(
            drift=lambda x: np.zeros_like(x),
            diffusion=lambda x: np.ones_like(x),
            jump=lambda x, e: np.broadcast_to(e, x.shape).astype(float),
            jump_measure=jm,
            k_jump=max(1.0, half_width),
            k_coef=1.0,
            drift_jac=_const_jac_1d(0.0),
            diffusion_jac=_const_dsig_1d(0.0),
            jump_coeff_jac=_zero_jump_jac_1d(),
            sample_box=(-3.0, 3.0),
        )
    raise ValueError(f"unknown model preset: {name!r}")


def _reject_extra(params, name):
    if params:
        raise ValueError(f"unknown parameters for preset {name!r}: {sorted(params)}")


def _const_jac_1d(c):
    def jac(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), float(c))
    return jac


def _const_dsig_1d(c):
    # d sigma^{ij} / d x_k, shape (..., d, d, d)
    def jac(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1, 1), float(c))
    return jac


def _zero_jump_jac_1d():
    def jac(x, e):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 1))
    return jac


# ---------------------------------------------------------------------------
# driver / terminal / obstacle / weight
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriverSpec:
    """Nonlinear driver f(t, x, y, z, vbar).

    ``vbar`` collects the values of finitely many linear jump functionals
    vbar_i = integral of v(e) gamma_i(e) against the jump measure, where the
    ``functionals`` gamma_i are scalar callables of the mark.  ``lipschitz``
    is the declared joint Lipschitz constant in (y, z, vbar).
    """

    f: Callable
    functionals: tuple = ()
    lipschitz: float = 0.0
    f0_bound: float = 0.0

    MAX_FUNCTIONALS = 8

    def __post_init__(self):
        if self.lipschitz < 0:
            raise ValueError("Lipschitz constant must be >= 0")
        object.__setattr__(self, "functionals", tuple(self.functionals))
        if len(self.functionals) > self.MAX_FUNCTIONALS:
            raise ValueError(
                f"at most {self.MAX_FUNCTIONALS} jump functionals are supported; "
                f"regression can only estimate finitely many conditional moments")

    @property
    def n_functionals(self):
        return len(self.functionals)

    def f_zero(self, t, x):
        """f(t, x, 0, 0, 0), the inhomogeneous part of the driver."""
        x = np.asarray(x, dtype=float)
        m = x.shape[0] if x.ndim > 1 else 1
        y = np.zeros(m)
        z = np.zeros((m, x.shape[-1]))
        v = np.zeros((m, max(1, self.n_functionals)))
        return np.asarray(self.f(t, x, y, z, v), dtype=float)

    def spot_check_lipschitz(self, rng, x_box=(-1.0, 1.0), dim=1, t_range=(0.0, 1.0),
                             n=512, scale=1.0):
        """Max secant slope of f in (y, z, vbar) over random pairs.

        Returns the largest |f(a) - f(b)| / (|y_a-y_b| + |z_a-z_b| + |v_a-v_b|)
        found; values <= declared ``lipschitz`` (within slack) are consistent.
        """
        q = max(1, self.n_functionals)
        t = rng.uniform(*t_range, size=n)
        x = rng.uniform(x_box[0], x_box[1], size=(n, dim))
        worst = 0.0
        for _ in range(2):
            ya, yb = rng.normal(0, scale, (2, n))
            za, zb = rng.normal(0, scale, (2, n, dim))
            va, vb = rng.normal(0, scale, (2, n, q))
            num = np.zeros(n)
            for i in range(n):
                fa = self.f(t[i], x[i:i + 1], ya[i:i + 1], za[i:i + 1], va[i:i + 1])
                fb = self.f(t[i], x[i:i + 1], yb[i:i + 1], zb[i:i + 1], vb[i:i + 1])
                num[i] = abs(float(np.asarray(fa).ravel()[0]) - float(np.asarray(fb).ravel()[0]))
            den = (np.abs(ya - yb) + np.linalg.norm(za - zb, axis=-1)
                   + np.linalg.norm(va - vb, axis=-1))
            ok = den > 1e-12
            if ok.any():
                worst = max(worst, float(np.max(num[ok] / den[ok])))
        return worst


def zero_driver():
    return DriverSpec(f=lambda t, x, y, z, v: np.zeros_like(y), lipschitz=0.0)


def discount_driver(rate):
    """f = -rate * y: the discounting driver of linear pricing problems."""
    return DriverSpec(f=lambda t, x, y, z, v: -rate * y, lipschitz=abs(rate))


def borrowing_rate_driver(rate, borrow_rate, risk_premium):
    """Driver for hedging with a higher interest rate for borrowing.

    f(t,x,y,z,v) = -(rate*y + risk_premium*sum(z)
                     + (borrow_rate - rate) * min(y - sum(z), 0)).
    """
    spread = borrow_rate - rate

    def f(t, x, y, z, v):
        zs = np.sum(z, axis=-1)
        return -(rate * y + risk_premium * zs + spread * np.minimum(y - zs, 0.0))

    return DriverSpec(f=f, lipschitz=abs(rate) + abs(risk_premium) + 2 * abs(spread))


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition g with a declared polynomial growth bound."""

    g: Callable
    growth_scale: float = 1.0
    growth_power: float = 1.0

    def __call__(self, x):
        return np.asarray(self.g(np.asarray(x, dtype=float)), dtype=float)

    def check_square_integrable(self, weight, radius=200.0, n=4001):
        """Numerical check that g^2 * rho is integrable (1-d helper)."""
        x = np.linspace(-radius, radius, n)[:, None]
        vals = self(x) ** 2 * weight(x)
        total = np.trapezoid(vals, dx=2 * radius / (n - 1))
        tail = vals[-20:].mean() * radius
        if not np.isfinite(total) or (total > 0 and tail > 0.05 * total):
            raise QuadratureError("terminal condition is not square integrable "
                                  "against the configured weight")
        return float(total)


@dataclass(frozen=True)
class ObstacleSpec:
    """Obstacle h(t, x), continuous with |h| <= iota*(1 + |x|^kappa)."""

    h: Callable
    iota: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.iota <= 0 or self.kappa <= 0:
            raise ValueError("growth constants must be positive")

    def __call__(self, t, x):
        return np.asarray(self.h(t, np.asarray(x, dtype=float)), dtype=float)

    def spot_check_growth(self, box, t_grid, n=64):
        """Max of |h| / (iota*(1+|x|^kappa)) on a (t, x) grid; <= 1 passes."""
        xs = np.linspace(box[0], box[1], n)[:, None]
        worst = 0.0
        for t in t_grid:
            vals = np.abs(self(t, xs))
            bound = self.iota * (1.0 + np.linalg.norm(xs, axis=-1) ** self.kappa)
            worst = max(worst, float(np.max(vals / bound)))
        return worst


@dataclass(frozen=True)
class WeightFunction:
    """Integrable weight rho(x) = (1 + |x|)^(-p)."""

    p: float

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError("weight exponent must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            return (1.0 + abs(float(x))) ** (-self.p)
        r = np.linalg.norm(x, axis=-1) if x.shape[-1:] and x.ndim > 1 else np.abs(x)
        return (1.0 + r) ** (-self.p)

    def exponent_floor(self, dim, kappa):
        """Smallest admissible exponent kappa + dim + 1 for obstacle problems."""
        return kappa + dim + 1

    def admits_obstacle(self, dim, kappa):
        return self.p >= self.exponent_floor(dim, kappa) - 1e-12


# ---------------------------------------------------------------------------
# derivatives of user fields
# ---------------------------------------------------------------------------

def fd_step(x):
    """Default relative finite-difference step 1e-4 * (1 + |x|)."""
    return 1e-4 * (1.0 + np.abs(np.asarray(x, dtype=float)))


def numerical_gradient(phi, x, h=None):
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape).copy()
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        grad[i] = (phi(xp) - phi(xm)) / (2.0 * h[i])
    return grad


def numerical_hessian(phi, x, h=None):
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape).copy()
    d = x.size
    hess = np.empty((d, d))
    f0 = phi(x)
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        hess[i, i] = (phi(xp) - 2.0 * f0 + phi(xm)) / h[i] ** 2
        for j in range(i + 1, d):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [h[i], h[j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            xmm[[i, j]] -= [h[i], h[j]]
            hess[i, j] = hess[j, i] = (
                phi(xpp) - phi(xpm) - phi(xmp) + phi(xmm)
            ) / (4.0 * h[i] * h[j])
    return hess


# ---------------------------------------------------------------------------
# generator pieces and residual
# ---------------------------------------------------------------------------

def generator_local(model, phi, x, grad=None, hess=None):
    """Drift-diffusion part of the generator at a point.

    Returns sum_i b^i d_i phi + 1/2 sum_ij a^ij d_ij phi with a = sigma sigma^T.
    ``grad``/``hess`` are analytic derivatives when supplied, central finite
    differences otherwise.
    """
    x = np.asarray(x, dtype=float).reshape(model.dim)
    g = np.asarray(grad(x), dtype=float) if grad is not None else numerical_gradient(phi, x)
    h = np.asarray(hess(x), dtype=float) if hess is not None else numerical_hessian(phi, x)
    b = np.asarray(model.drift(x[None, :]), dtype=float)[0]
    a = model.diffusion_matrix(x[None, :])[0]
    out = float(b @ g + 0.5 * np.sum(a * h))
    if not math.isfinite(out):
        raise NumericError(f"non-finite local generator value at x={x!r}")
    return out


def generator_jump(model, phi, x, grad=None):
    """Compensated jump part of the generator at a point.

    Returns sum_j w_j [phi(x + beta(x, e_j)) - phi(x) - beta(x, e_j) . grad phi(x)].
    Vanishes identically when the model has no jumps and on affine phi.
    """
    x = np.asarray(x, dtype=float).reshape(model.dim)
    if not model.has_jumps:
        return 0.0
    nodes = model.jump_measure.nodes
    weights = model.jump_measure.weights
    g = np.asarray(grad(x), dtype=float) if grad is not None else numerical_gradient(phi, x)
    xb = np.broadcast_to(x, (nodes.size, model.dim))
    beta = np.asarray(model.jump_coeff(xb, nodes), dtype=float)
    shifted = xb + beta
    vals = np.array([phi(shifted[j]) for j in range(nodes.size)], dtype=float)
    out = float(np.sum(weights * (vals - phi(x) - beta @ g)))
    if not math.isfinite(out):
        raise NumericError(f"non-finite jump generator value at x={x!r}")
    return out


def pide_residual(model, driver, u, t, x, t_step=None):
    """Strong-form residual of the PIDE at (t, x).

    ``u(t, x)`` is a scalar time-space field; the time derivative is one-sided
    (forward difference).  Returns d_t u + (local + jump generator) u
    + f(t, x, u, sigma^T grad u, vbar[u]) where the i-th jump functional of u
    is sum_j w_j gamma_i(e_j) (u(t, x + beta(x, e_j)) - u(t, x)).
    """
    x = np.asarray(x, dtype=float).reshape(model.dim)
    ht = 1e-6 * (1.0 + abs(t)) if t_step is None else t_step
    ut = (u(t + ht, x) - u(t, x)) / ht

    def phi(xx):
        return u(t, xx)

    grad = numerical_gradient(phi, x)
    val_local = generator_local(model, phi, x)
    val_jump = generator_jump(model, phi, x, grad=lambda _x: grad)

    sig = np.asarray(model.diffusion(x[None, :]), dtype=float)[0]
    z = (sig.T @ grad)[None, :]
    u0 = u(t, x)
    q = max(1, driver.n_functionals)
    vbar = np.zeros((1, q))
    if driver.n_functionals and model.has_jumps:
        nodes = model.jump_measure.nodes
        weights = model.jump_measure.weights
        xb = np.broadcast_to(x, (nodes.size, model.dim))
        beta = np.asarray(model.jump_coeff(xb, nodes), dtype=float)
        jumps_u = np.array([u(t, (xb + beta)[j]) for j in range(nodes.size)]) - u0
        for i, gamma in enumerate(driver.functionals):
            vbar[0, i] = np.sum(weights * np.asarray(gamma(nodes), dtype=float) * jumps_u)
    fval = float(np.asarray(driver.f(t, x[None, :], np.array([u0]), z, vbar)).ravel()[0])
    out = float(ut + val_local + val_jump + fval)
    if not math.isfinite(out):
        raise NumericError(f"non-finite PIDE residual at (t={t}, x={x!r})")
    return out


# ---------------------------------------------------------------------------
# jump-map diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpMapReport:
    injective: bool
    min_jacobian: float


def check_jump_map(model, e, box, grid_pts=64):
    """Diagnose whether x -> x + beta(x, e) is invertible on a box.

    Evaluates the map on a grid, reports injectivity violations (strict
    monotonicity in 1-d, near-duplicate images otherwise) and the minimum
    determinant of I + d beta/dx estimated by finite differences.  A failed
    check is a report, not an error.
    """
    if grid_pts < 2:
        raise ValueError("need at least 2 grid points per axis")
    d = model.dim
    lo, hi = box
    axes = [np.linspace(lo, hi, grid_pts) for _ in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    marks = np.full(mesh.shape[0], float(e))
    images = mesh + np.asarray(model.jump_coeff(mesh, marks), dtype=float)

    # finite-difference Jacobian of the displacement
    min_det = np.inf
    h = 1e-5 * (hi - lo)
    jac = np.empty((mesh.shape[0], d, d))
    for k in range(d):
        xp = mesh.copy()
        xm = mesh.copy()
        xp[:, k] += h
        xm[:, k] -= h
        db = (np.asarray(model.jump_coeff(xp, marks)) - np.asarray(model.jump_coeff(xm, marks))) / (2 * h)
        jac[:, :, k] = db
    dets = np.linalg.det(np.eye(d)[None, :, :] + jac)
    min_det = float(dets.min())

    if d == 1:
        vals = images[:, 0]
        diffs = np.diff(vals)
        injective = bool(np.all(diffs > 1e-12 * (hi - lo)) or np.all(diffs < -1e-12 * (hi - lo)))
    else:
        order = np.lexsort(images.T)
        sorted_imgs = images[order]
        gaps = np.linalg.norm(np.diff(sorted_imgs, axis=0), axis=1)
        injective = bool(np.all(gaps > 1e-10 * (hi - lo))) and min_det > 0
    return JumpMapReport(injective=injective, min_jacobian=min_det)
