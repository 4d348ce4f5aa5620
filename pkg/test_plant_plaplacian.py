#!/usr/bin/env python3
"""
Tests for the discretized boundary-controlled p-Laplacian
"""
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

import numpy as np
import pytest

from core.convex_sets import Ball, Box
from core.errors import ConvergenceError
from core.inclusion import power_balance_dissipation, feasible_input, steady_io
from plants.plaplacian import (PdeParams, PLaplacianPlant, apply_duality_map, boundary_load,
                               build_plaplacian, grid_convergence_ratio, hyperbolic_error,
                               hyperbolic_steady_state, pde_h, pde_output, pde_steady_state,
                               roundoff_floor, solve_monotone, weak_duality_map)

COARSE = PdeParams(p=4, n_grid=41)


def test_constant_field_residuals():
    """Constant fields have no gradient, so only the reaction term remains."""
    w = np.full(50, 1.5)
    linear = apply_duality_map(PdeParams(p=2, n_grid=50), 0.0, 0.0, w, [0.0, 0.0])
    assert linear == pytest.approx(np.full(50, 1.5))
    cubic = apply_duality_map(PdeParams(p=4, n_grid=50), 0.0, 0.0, w, [0.0, 0.0])
    assert cubic == pytest.approx(np.full(50, 1.5 ** 3))
    print("✓ constant field residuals")


def test_duality_map_is_monotone():
    """<Phi(w1) - Phi(w2), w1 - w2> equals the internal dissipation and is nonnegative."""
    plant = PLaplacianPlant(COARSE)
    rng = np.random.default_rng(5)
    for _ in range(20):
        w1, w2 = plant.sample_state(rng), plant.sample_state(rng)
        pairing = float((weak_duality_map(COARSE, 0.0, 0.0, w1) - weak_duality_map(COARSE, 0.0, 0.0, w2))
                        @ (w1 - w2))
        assert pairing >= 0
        assert pairing == pytest.approx(pde_h(COARSE, w1, w2), rel=1e-9, abs=1e-12)


def test_duality_map_is_coercive():
    plant = PLaplacianPlant(COARSE)
    rng = np.random.default_rng(6)
    w = plant.sample_state(rng)
    ratios = []
    for scale in (1.0, 10.0, 100.0):
        field = scale * w
        norm = np.sqrt(plant.state_metric(field, field))
        ratios.append(float(weak_duality_map(COARSE, 0.0, 0.0, field) @ field) / norm)
    assert ratios[0] < ratios[1] < ratios[2]


def test_zero_data_gives_zero_field():
    assert solve_monotone(COARSE, 0.0, 0.0, 0.0, [0.0, 0.0]) == pytest.approx(np.zeros(41))
    assert pde_steady_state(COARSE, [0.0, 0.0]) == pytest.approx(np.zeros(41))


def test_linear_steady_state_matches_closed_form():
    params = PdeParams(p=2, n_grid=200)
    assert hyperbolic_error(params, [1.0, 1.0]) <= 1e-3
    a = (1.0 + np.cosh(1.0)) / np.sinh(1.0)
    assert pde_output(params, pde_steady_state(params, [1.0, 1.0])) == pytest.approx(
        [a, a * np.cosh(1.0) - np.sinh(1.0)], abs=1e-3)
    print("✓ closed-form steady state")


def test_linear_steady_state_is_second_order():
    ratio = grid_convergence_ratio(PdeParams(p=2, n_grid=200), [1.0, 1.0])
    assert 3.5 <= ratio <= 4.5


def test_hyperbolic_profile_is_symmetric_for_equal_fluxes():
    x = np.linspace(0.0, 1.0, 11)
    w = hyperbolic_steady_state([1.0, 1.0], x)
    assert w == pytest.approx(w[::-1])
    with pytest.raises(ValueError):
        hyperbolic_error(PdeParams(p=4), [1.0, 1.0])


def test_quartic_steady_state_self_consistent():
    params = PdeParams(p=4, n_grid=200)
    w = pde_steady_state(params, [1.0, 1.0])
    residual = apply_duality_map(params, 0.0, 0.0, w, [1.0, 1.0])
    assert np.max(np.abs(residual)) <= 1e-6
    assert w == pytest.approx(w[::-1], abs=1e-9)


def test_stiff_solve_meets_tolerance_or_roundoff_floor():
    """At lam = 1e6 the requested 1e-14 is below what doubles resolve; the result must sit under the floor."""
    params = PdeParams(p=4, n_grid=200)
    lam, rhs = 1e6, 1e6 * np.cos(np.pi * params.nodes)
    w = solve_monotone(params, lam, 0.0, rhs, [1.0, 1.0], newton_tol=1e-14)
    residual = np.max(np.abs(apply_duality_map(params, lam, 0.0, w, [1.0, 1.0]) - rhs))
    load = params.weights * rhs + boundary_load(params, [1.0, 1.0])
    floor = roundoff_floor(params, lam, 0.0, w, load)
    assert floor < 1e-6
    assert residual <= 2.0 * max(1e-14 * (1.0 + np.max(np.abs(w))), floor)


def test_unconverged_solve_raises():
    with pytest.raises(ConvergenceError) as info:
        solve_monotone(PdeParams(p=4, n_grid=200), 0.0, 0.0, 0.0, [1.0, 1.0], newton_tol=1e-14, max_iter=1)
    assert info.value.residual > 1e-14


def test_steady_state_is_injective():
    rng = np.random.default_rng(11)
    inputs = rng.uniform(-2.0, 2.0, size=(6, 2))
    fields = [pde_steady_state(COARSE, u) for u in inputs]
    for i in range(len(inputs)):
        for j in range(i):
            assert np.max(np.abs(fields[i] - fields[j])) > 1e-6


@pytest.mark.parametrize("p, threshold", [(2, 1e-20), (4, 1e-36)])
def test_vanishing_dissipation_forces_equal_fields(p, threshold):
    """
    sup|w1 - w2| <= 2 * (2^{p-2} h)^{1/p} on the unit grid, so h below the
    threshold pins the fields together to 1e-8.
    """
    params = PdeParams(p=p, n_grid=50)
    rng = np.random.default_rng(12)
    qualifying = 0
    for scale in 10.0 ** -np.arange(0, 18):
        base = rng.normal(size=50) * rng.choice([0.0, 1.0])
        other = base + scale * rng.normal(size=50)
        if pde_h(params, base, other) <= threshold:
            qualifying += 1
            assert np.max(np.abs(base - other)) <= 1e-8
    assert qualifying > 0


def test_outputs():
    assert pde_output(COARSE, np.full(41, 0.3)) == pytest.approx([0.3, 0.3])
    antisymmetric = np.cos(np.pi * COARSE.nodes)
    y = pde_output(COARSE, antisymmetric)
    assert y[0] == pytest.approx(-y[1])


def test_h_examples():
    linear = PdeParams(p=2, n_grid=50)
    w = np.linspace(-1.0, 1.0, 50)
    assert pde_h(linear, w, w) == 0.0
    assert pde_h(linear, np.ones(50), np.zeros(50)) == pytest.approx(1.0)
    assert pde_h(PdeParams(p=4, n_grid=50), np.full(50, 2.0), np.zeros(50)) == pytest.approx(16.0)


def test_plant_h_matches_power_balance():
    plant = PLaplacianPlant(COARSE)
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = plant.sample_point(rng), plant.sample_point(rng)
        assert plant.dissipation_h(a.x, a.u, a.f, b.x, b.u, b.f) == pytest.approx(
            power_balance_dissipation(plant, a.x, a.u, a.f, b.x, b.u, b.f), rel=1e-8, abs=1e-9)


def test_feasible_input_inverts_linear_steady_map():
    plant = PLaplacianPlant(PdeParams(p=2, n_grid=200))
    r = steady_io(plant, [1.0, 1.0])
    u = feasible_input(plant, r, Box([-2.0, -2.0], [2.0, 2.0]))
    assert u == pytest.approx([1.0, 1.0], abs=1e-6)


def test_coupled_step_keeps_equilibrium():
    plant = PLaplacianPlant(COARSE)
    u_star = np.array([1.0, 1.0])
    w_star = plant.steady_state(u_star)
    r = plant.output(w_star, u_star)
    step = plant.coupled_resolvent(0.01, w_star, u_star, r, Box([-2.0, -2.0], [2.0, 2.0]))
    assert step.branch == 'free/free'
    assert step.x == pytest.approx(w_star, abs=1e-8)
    assert step.z == pytest.approx(u_star, abs=1e-8)


def test_coupled_step_saturates_on_box():
    plant = PLaplacianPlant(PdeParams(p=2, n_grid=41))
    K = Box([-2.0, -2.0], [2.0, 2.0])
    step = plant.coupled_resolvent(0.1, np.zeros(41), [0.5, 0.5], [100.0, 100.0], K)
    assert step.branch == 'upper/upper'
    assert step.z == pytest.approx([2.0, 2.0])
    assert K.normal_cone_contains(step.z, step.force, tol=1e-8)


def test_coupled_step_alternation_on_ball():
    plant = PLaplacianPlant(PdeParams(p=2, n_grid=41))
    K = Ball([0.0, 0.0], 1.0)
    step = plant.coupled_resolvent(0.01, np.zeros(41), [0.5, 0.5], [100.0, 100.0], K)
    assert step.branch == 'alternation'
    assert K.contains(step.z, 1e-12)
    assert K.normal_cone_contains(step.z, step.force, tol=1e-6)


def test_invalid_params_rejected():
    with pytest.raises(ValueError, match="even"):
        PdeParams(p=3)
    with pytest.raises(ValueError, match="n_grid"):
        PdeParams(n_grid=4)


def test_scalar_state_is_constant_field():
    plant = build_plaplacian({'plant': 'plaplacian', 'p': 4, 'n_grid': 20})
    assert plant.check_state(0.5) == pytest.approx(np.full(20, 0.5))
    assert plant.describe()['n_grid'] == 20


def main():
    """Run tests."""
    print("=" * 60)
    print("p-Laplacian Plant Tests")
    print("=" * 60)
    test_constant_field_residuals()
    test_linear_steady_state_matches_closed_form()
    test_h_examples()
    print("✓ All tests passed")


if __name__ == '__main__':
    main()
