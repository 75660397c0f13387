import math

import numpy as np
import pytest

from pidesolve.errors import NumericError
from pidesolve.forward import TimeGrid, simulate_paths
from pidesolve.model import (DriverSpec, JumpMeasure, ObstacleSpec,
                             TerminalSpec, WeightFunction, check_jump_map,
                             discount_driver, borrowing_rate_driver,
                             generator_jump, generator_local, named_model,
                             pide_residual, scalar_model, zero_driver)


# ---------------------------------------------------------------------------
# jump measure
# ---------------------------------------------------------------------------

def test_uniform_measure_moments():
    jm = JumpMeasure.uniform(-1.0, 1.0, intensity=1.0)
    assert jm.weights.sum() == pytest.approx(1.0, rel=1e-12)
    assert jm.mean_mark() == pytest.approx(0.0, abs=1e-14)
    assert jm.second_moment() == pytest.approx(1.0 / 3.0, rel=1e-12)


def test_gaussian_measure_moments():
    jm = JumpMeasure.gaussian(-0.1, 0.15, intensity=2.0)
    assert jm.weights.sum() == pytest.approx(2.0, rel=1e-12)
    assert jm.mean_mark() == pytest.approx(-0.1, abs=1e-12)
    assert jm.second_moment() == pytest.approx(0.1**2 + 0.15**2, rel=1e-10)


def test_two_point_measure():
    jm = JumpMeasure.two_point(-0.2, 0.1, p_up=0.75, intensity=3.0)
    assert jm.weights.sum() == pytest.approx(3.0)
    assert jm.mean_mark() == pytest.approx(0.25 * (-0.2) + 0.75 * 0.1)


def test_sampler_matches_quadrature_moments():
    rng = np.random.default_rng(0)
    for jm in (JumpMeasure.uniform(), JumpMeasure.gaussian(-0.1, 0.15),
               JumpMeasure.two_point(-0.3, 0.2, 0.4)):
        assert jm.sampler_moment_gap(rng, n=200_000) < 4.0


def test_measure_rejects_bad_weights():
    with pytest.raises(ValueError):
        JumpMeasure(1.0, lambda rng, n: rng.normal(size=n),
                    np.array([0.0]), np.array([-1.0]))
    with pytest.raises(ValueError):
        JumpMeasure(-1.0)
    with pytest.raises(ValueError):
        # weights must sum to the intensity
        JumpMeasure(2.0, lambda rng, n: rng.normal(size=n),
                    np.array([0.5]), np.array([1.0]))


def test_jump_bound_spot_check():
    model = named_model("toy-uniform")
    rng = np.random.default_rng(1)
    assert model.spot_check_jump_bound(rng) <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# generator pieces (spec examples)
# ---------------------------------------------------------------------------

def test_local_generator_pure_diffusion(heat_model):
    assert generator_local(heat_model, lambda x: float(x[0] ** 2), [3.0]) \
        == pytest.approx(1.0, abs=1e-6)


def test_local_generator_drift_only():
    m = scalar_model(drift=lambda x: 2.0 + 0 * x, diffusion=lambda x: 0 * x)
    assert generator_local(m, lambda x: float(x[0]), [0.7]) == pytest.approx(2.0, abs=1e-9)


def test_local_generator_combined():
    m = scalar_model(drift=lambda x: np.ones_like(x),
                     diffusion=lambda x: 2.0 * np.ones_like(x))
    assert generator_local(m, lambda x: float(x[0] ** 2), [1.0]) \
        == pytest.approx(6.0, abs=1e-6)


def test_jump_generator_no_jumps(heat_model):
    assert generator_jump(heat_model, lambda x: float(np.exp(x[0])), [0.3]) == 0.0


def test_jump_generator_affine_exact(toy_model):
    # compensation cancels affine terms exactly
    for a, b in [(3.0, 2.0), (-1.5, 0.0), (0.0, 7.0)]:
        val = generator_jump(toy_model, lambda x: float(a * x[0] + b), [0.4],
                             grad=lambda x: np.array([a]))
        assert val == pytest.approx(0.0, abs=1e-12)


def test_jump_generator_quadratic(toy_model):
    # oracle: exact integral of e^2 against the uniform measure = 1/3
    val = generator_jump(toy_model, lambda x: float(x[0] ** 2), [0.0],
                         grad=lambda x: np.array([0.0]))
    assert val == pytest.approx(1.0 / 3.0, rel=1e-10)


def test_generator_linearity(toy_model):
    rng = np.random.default_rng(3)
    x = [0.6]
    phi = lambda x_: float(np.sin(x_[0]) + x_[0] ** 2)
    psi = lambda x_: float(np.cos(2 * x_[0]))
    alpha = 1.7

    def combo(x_):
        return alpha * phi(x_) + psi(x_)

    for op in (generator_local, generator_jump):
        lhs = op(toy_model, combo, x)
        rhs = alpha * op(toy_model, phi, x) + op(toy_model, psi, x)
        assert lhs == pytest.approx(rhs, rel=1e-7, abs=1e-9)


def test_full_operator_reduces_to_local_without_jumps(heat_model):
    phi = lambda x_: float(np.sin(x_[0]))
    x = [0.3]
    assert generator_jump(heat_model, phi, x) == 0.0
    total = generator_local(heat_model, phi, x) + generator_jump(heat_model, phi, x)
    assert total == generator_local(heat_model, phi, x)


def test_generator_nonfinite_raises():
    m = scalar_model(drift=lambda x: np.full_like(x, np.nan),
                     diffusion=lambda x: np.ones_like(x))
    with pytest.raises(NumericError):
        generator_local(m, lambda x: float(x[0]), [0.0])


def test_mc_generator_consistency(toy_model):
    # (E[phi(X_delta)] - phi(x)) / delta approximates the generator
    phi_vec = lambda x: np.exp(-x**2)
    phi = lambda x_: float(np.exp(-x_[0] ** 2))
    x0 = 0.4
    gen = generator_local(toy_model, phi, [x0]) + generator_jump(toy_model, phi, [x0])
    for delta, m in ((1e-2, 200_000), (1e-3, 400_000)):
        b = simulate_paths(toy_model, TimeGrid(0.0, delta, 1), x0, m, seed=17)
        samples = (phi_vec(b.states[-1][:, 0]) - phi(np.array([x0]))) / delta
        se = samples.std(ddof=1) / math.sqrt(m)
        assert abs(samples.mean() - gen) < 3 * se + 0.6 * delta * abs(gen)


# ---------------------------------------------------------------------------
# PIDE residual (spec examples)
# ---------------------------------------------------------------------------

def test_residual_heat_solution(heat_model):
    u = lambda t, x: float(x[0] ** 2) + (1.0 - t)
    assert pide_residual(heat_model, zero_driver(), u, 0.25, [0.8]) \
        == pytest.approx(0.0, abs=1e-6)


def test_residual_constant(toy_model):
    u = lambda t, x: 5.0
    assert pide_residual(toy_model, zero_driver(), u, 0.5, [1.2]) \
        == pytest.approx(0.0, abs=1e-9)


def test_residual_toy_jump_solution(toy_model):
    # oracle: jump generator of x^2 is exactly 1/3, so u solves the PIDE
    u = lambda t, x: float(x[0] ** 2) + (1.0 - t) * (1.0 + 1.0 / 3.0)
    assert pide_residual(toy_model, zero_driver(), u, 0.3, [0.5]) \
        == pytest.approx(0.0, abs=1e-6)


# ---------------------------------------------------------------------------
# jump map diagnostics (spec examples)
# ---------------------------------------------------------------------------

def test_jump_map_translation(toy_model):
    rep = check_jump_map(toy_model, 0.5, (-3.0, 3.0), 64)
    assert rep.injective
    assert rep.min_jacobian == pytest.approx(1.0, abs=1e-7)


def test_jump_map_collapse():
    m = scalar_model(drift=lambda x: 0 * x, diffusion=lambda x: np.ones_like(x),
                     jump=lambda x, e: -x, jump_measure=JumpMeasure.uniform())
    rep = check_jump_map(m, 0.5, (-3.0, 3.0), 64)
    assert not rep.injective
    assert rep.min_jacobian == pytest.approx(0.0, abs=1e-6)


def test_jump_map_sin_contraction():
    m = scalar_model(drift=lambda x: 0 * x, diffusion=lambda x: np.ones_like(x),
                     jump=lambda x, e: 0.5 * np.sin(x) * np.minimum(1.0, np.abs(e)),
                     jump_measure=JumpMeasure.uniform())
    rep = check_jump_map(m, 2.0, (-4.0, 4.0), 201)
    assert rep.injective
    # oracle: derivative 1 + 0.5 cos(x) has minimum 0.5 on the grid
    assert rep.min_jacobian == pytest.approx(0.5, abs=2e-3)
    assert rep.min_jacobian >= 0.5 - 2e-3


# ---------------------------------------------------------------------------
# driver / terminal / obstacle / weight
# ---------------------------------------------------------------------------

def test_discount_driver_lipschitz():
    drv = discount_driver(0.05)
    rng = np.random.default_rng(5)
    assert drv.spot_check_lipschitz(rng, n=128) <= 0.05 + 1e-9


def test_borrowing_driver_lipschitz_spot_check():
    drv = borrowing_rate_driver(0.04, 0.06, 0.1)
    rng = np.random.default_rng(6)
    assert drv.spot_check_lipschitz(rng, n=128) <= drv.lipschitz + 1e-9


def test_driver_functional_cap():
    gammas = tuple((lambda e: e) for _ in range(9))
    with pytest.raises(ValueError, match="at most 8"):
        DriverSpec(f=lambda t, x, y, z, v: np.zeros_like(y), functionals=gammas)


def test_driver_f_zero():
    drv = DriverSpec(f=lambda t, x, y, z, v: -0.1 * y + x[:, 0], lipschitz=0.1)
    x = np.array([[2.0], [3.0]])
    assert np.allclose(drv.f_zero(0.0, x), [2.0, 3.0])


def test_terminal_square_integrability():
    g = TerminalSpec(g=lambda X: X[:, 0] ** 2, growth_power=2.0)
    g.check_square_integrable(WeightFunction(6))
    from pidesolve.errors import QuadratureError
    with pytest.raises(QuadratureError):
        g.check_square_integrable(WeightFunction(1))


def test_obstacle_growth_check():
    h = ObstacleSpec(h=lambda t, X: np.maximum(100.0 - X[:, 0], 0.0),
                     iota=100.0, kappa=1.0)
    assert h.spot_check_growth((0.0, 400.0), [0.0, 0.5, 1.0]) <= 1.0


def test_weight_function():
    w = WeightFunction(4)
    assert w(np.zeros(1)) == pytest.approx(1.0)
    assert w(np.array([[1.0]])) == pytest.approx(2.0**-4)
    assert w.admits_obstacle(dim=1, kappa=1.0)
    assert not WeightFunction(2).admits_obstacle(dim=1, kappa=1.0)


def test_named_model_unknown():
    with pytest.raises(ValueError):
        named_model("does-not-exist")
    with pytest.raises(ValueError):
        named_model("bs", bogus=1)
