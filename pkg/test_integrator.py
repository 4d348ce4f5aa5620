#!/usr/bin/env python3
"""
Tests for the closed-loop integrator: implicit and splitting steps, trajectories, failures
"""
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

import numpy as np
import pytest

from core.convex_sets import Box
from core.errors import ConvergenceError, SimulationError
from core.inclusion import steady_state
from core.integrator import (ClosedLoopConfig, Scheme, Trajectory, simulate, simulate_open_loop,
                             step_implicit, step_splitting)
from plants.linear_node import LinearNodePlant, build_strictified_node
from plants.rlc import RlcParams, RlcPlant


def scalar_node():
    """x' = -x + u, y = x."""
    return build_strictified_node([[0.0]], None, [[1.0]], 1.0)


def scalar_config(h=1.0, T=1.0, scheme=Scheme.IMPLICIT):
    return ClosedLoopConfig([1.0], Box([-10.0], [10.0]), h, T, scheme)


def test_implicit_step_scalar_example():
    """(x - 0)/1 = -x + z, (z - 0)/1 = 1 - x gives x = 1/3, z = 2/3."""
    result = step_implicit(scalar_node(), scalar_config(), np.zeros(1), np.zeros(1))
    assert result.x == pytest.approx([1.0 / 3.0])
    assert result.z == pytest.approx([2.0 / 3.0])
    assert result.z_force == pytest.approx([0.0], abs=1e-12)
    assert result.selection == pytest.approx([1.0 / 3.0])
    print("✓ implicit scalar step")


def test_steady_state_is_a_fixed_point():
    plant = RlcPlant(RlcParams())
    cfg = ClosedLoopConfig([2.0], Box([0.25], [3.0]), 1e-3, 1.0)
    pair = steady_state(plant, [1.0])
    result = step_implicit(plant, cfg, pair.x_star, pair.u_star)
    assert result.x == pytest.approx(pair.x_star, abs=1e-12)
    assert result.z == pytest.approx(pair.u_star, abs=1e-12)


def test_splitting_agrees_to_second_order():
    h = 1e-2
    plant = scalar_node()
    implicit = step_implicit(plant, scalar_config(h, h), np.zeros(1), np.zeros(1))
    split = step_splitting(plant, scalar_config(h, h, Scheme.SPLITTING), np.zeros(1), np.zeros(1))
    assert abs(implicit.x[0] - split.x[0]) <= 2 * h ** 2
    assert abs(implicit.z[0] - split.z[0]) <= 2 * h ** 2


def test_splitting_projects_z():
    cfg = ClosedLoopConfig([100.0], Box([-1.0], [1.0]), 0.1, 0.1, Scheme.SPLITTING)
    result = step_splitting(scalar_node(), cfg, np.zeros(1), np.zeros(1))
    assert result.z == pytest.approx([1.0])
    # r - y - (z_next - z_prev)/h = 100 - 0 - 10
    assert result.z_force == pytest.approx([90.0])


def test_simulate_records_trajectory():
    plant = RlcPlant(RlcParams())
    cfg = ClosedLoopConfig([2.0], Box([0.25], [3.0]), 1e-2, 1.0)
    pair = steady_state(plant, [1.0])
    traj = simulate(plant, cfg, [0.0, 0.0, 0.0], [0.5], target=pair)
    assert len(traj) == cfg.n_steps + 1 == 101
    assert traj.times[-1] == pytest.approx(1.0)
    assert np.isnan(traj.h_values[0])
    assert np.all(traj.h_values[1:] >= 0)
    assert traj.dist_to_star[0] == pytest.approx(np.sqrt(4.0 + 1.0 + 0.25))
    assert np.all(traj.z_values >= 0.25) and np.all(traj.z_values <= 3.0)
    assert traj.outputs[:, 0] == pytest.approx(traj.states[:, 0])


def test_simulate_without_target():
    traj = simulate(scalar_node(), scalar_config(0.5, 1.0), [0.0], [0.0])
    assert np.all(np.isnan(traj.h_values))
    assert len(traj.dist_to_star) == 0
    rows = traj.to_rows()
    assert len(rows) == 3 and np.isnan(rows[0][-1])


def test_z0_outside_K():
    with pytest.raises(ValueError, match="outside K"):
        simulate(scalar_node(), scalar_config(), [0.0], [11.0])


def test_z0_barely_outside_K_is_projected():
    traj = simulate(scalar_node(), scalar_config(), [0.0], [10.0 + 1e-12])
    assert traj.z_values[0] == pytest.approx([10.0])


def test_scheme_from_string():
    cfg = ClosedLoopConfig([1.0], Box([-1.0], [1.0]), 0.1, 1.0, 'Splitting')
    assert cfg.scheme is Scheme.SPLITTING
    assert cfg.with_scheme(Scheme.IMPLICIT).scheme is Scheme.IMPLICIT
    moved = cfg.with_reference([0.5]).with_step(0.05)
    assert moved.reference_r == pytest.approx([0.5])
    assert moved.n_steps == 20 and moved.scheme is Scheme.SPLITTING
    with pytest.raises(ValueError):
        ClosedLoopConfig([1.0], Box([-1.0], [1.0]), 0.0, 1.0)


class FailingNode(LinearNodePlant):
    """Node whose coupled solve fails after a number of successful calls."""

    def __init__(self, params, fail_from=0, fail_until=None):
        super().__init__(params)
        self.calls = 0
        self.fail_from = fail_from
        self.fail_until = fail_until

    def coupled_resolvent(self, h, x_prev, z_prev, r, K, tol=1e-12, max_iter=100):
        self.calls += 1
        if self.calls > self.fail_from and (self.fail_until is None or self.calls <= self.fail_until):
            raise ConvergenceError("forced failure", 1, 1.0)
        return super().coupled_resolvent(h, x_prev, z_prev, r, K, tol, max_iter)


def test_failed_step_raises_with_partial_trajectory():
    plant = FailingNode(scalar_node().params, fail_from=2)
    with pytest.raises(SimulationError) as info:
        simulate(plant, scalar_config(0.25, 1.0), [0.0], [0.0])
    assert info.value.step_index == 3
    assert isinstance(info.value.trajectory, Trajectory)
    assert len(info.value.trajectory) == 3


def test_failed_step_retried_with_half_steps():
    plant = FailingNode(scalar_node().params, fail_from=0, fail_until=1)
    reference = scalar_node()
    cfg = scalar_config(0.5, 0.5)
    result = step_implicit(plant, cfg, np.zeros(1), np.zeros(1))
    half = scalar_config(0.25, 0.25)
    first = step_implicit(reference, half, np.zeros(1), np.zeros(1))
    second = step_implicit(reference, half, first.x, first.z)
    assert result.x == pytest.approx(second.x)
    assert result.z == pytest.approx(second.z)
    # force recomputed from the recorded values after a retry
    assert result.z_force == pytest.approx([1.0 - second.x[0] - (second.z[0] - 0.0) / 0.5])


class NegativeDissipationNode(LinearNodePlant):
    """Node whose closed-form dissipation is wrong by a large negative constant."""

    def dissipation_h(self, x1, u1, f1, x2, u2, f2) -> float:
        return -5.0


def test_negative_dissipation_surfaces_from_simulate():
    plant = NegativeDissipationNode(scalar_node().params)
    pair = steady_state(plant, [1.0])
    with pytest.raises(ValueError, match="negative internal dissipation"):
        simulate(plant, scalar_config(0.5, 1.0), [0.0], [0.0], target=pair)


def test_simulate_is_bitwise_deterministic():
    plant = RlcPlant(RlcParams())
    cfg = ClosedLoopConfig([2.0], Box([0.25], [3.0]), 1e-2, 0.5)
    pair = steady_state(plant, [1.0])
    first = simulate(plant, cfg, [0.0, 0.0, 0.0], [0.5], target=pair)
    second = simulate(RlcPlant(RlcParams()), cfg, [0.0, 0.0, 0.0], [0.5], target=pair)
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.z_values, second.z_values)
    assert np.array_equal(first.h_values[1:], second.h_values[1:])


def test_open_loop_simulation():
    """Implicit Euler of x' = -x + 1 with h = 1: x_k = 1 - 2^-k."""
    states = simulate_open_loop(scalar_node(), 1.0, [0.0], [[1.0]] * 3)
    assert states[:, 0] == pytest.approx([0.0, 0.5, 0.75, 0.875])


def main():
    """Run tests."""
    print("=" * 60)
    print("Integrator Tests")
    print("=" * 60)
    test_implicit_step_scalar_example()
    test_splitting_agrees_to_second_order()
    test_simulate_records_trajectory()
    test_open_loop_simulation()
    print("✓ All tests passed")


if __name__ == '__main__':
    main()
