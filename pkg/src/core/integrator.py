"""
Closed-Loop Integrator Module
Fixed-step time discretization of the plant in closed loop with the projected integrator
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .convex_sets import ConvexSet, as_vector
from .errors import ConvergenceError, DimensionMismatchError, SimulationError
from .inclusion import Plant, SteadyStatePair, dissipation_h, product_distance

logger = logging.getLogger(__name__)

Z0_PROJECTION_TOL = 1e-9


class Scheme(Enum):
    IMPLICIT = 'implicit'
    SPLITTING = 'splitting'


@dataclass(frozen=True, eq=False)
class ClosedLoopConfig:
    """Reference, constraint set and integrator settings of one closed-loop run."""
    reference_r: np.ndarray
    constraint_K: ConvexSet
    step_h: float
    horizon_T: float
    scheme: Scheme = Scheme.IMPLICIT
    solver_tol: float = 1e-12
    solver_max_iter: int = 100

    def __post_init__(self):
        object.__setattr__(self, 'reference_r', as_vector(self.reference_r))
        if isinstance(self.scheme, str):
            object.__setattr__(self, 'scheme', Scheme(self.scheme.lower()))
        if not self.step_h > 0:
            raise ValueError("step_h must be positive")
        if not self.horizon_T >= self.step_h:
            raise ValueError("horizon_T must be at least step_h")
        if not self.solver_tol > 0:
            raise ValueError("solver_tol must be positive")
        if self.solver_max_iter < 1:
            raise ValueError("solver_max_iter must be positive")
        if self.reference_r.shape[0] != self.constraint_K.dim:
            raise DimensionMismatchError(self.constraint_K.dim, self.reference_r.shape[0], "reference")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T / self.step_h))

    def with_step(self, step_h: float, horizon_T: Optional[float] = None) -> 'ClosedLoopConfig':
        return ClosedLoopConfig(self.reference_r, self.constraint_K, step_h,
                                self.horizon_T if horizon_T is None else horizon_T,
                                self.scheme, self.solver_tol, self.solver_max_iter)

    def with_scheme(self, scheme: Scheme) -> 'ClosedLoopConfig':
        return ClosedLoopConfig(self.reference_r, self.constraint_K, self.step_h, self.horizon_T,
                                scheme, self.solver_tol, self.solver_max_iter)

    def with_reference(self, reference_r: Sequence[float]) -> 'ClosedLoopConfig':
        return ClosedLoopConfig(reference_r, self.constraint_K, self.step_h, self.horizon_T,
                                self.scheme, self.solver_tol, self.solver_max_iter)


@dataclass(frozen=True, eq=False)
class StepResult:
    x: np.ndarray
    z: np.ndarray
    selection: np.ndarray
    z_force: np.ndarray


@dataclass
class Trajectory:
    """
    Time-stamped closed-loop solution.

    h_values[0] and, without a target pair, every h value are NaN; dist_to_star
    is empty when no target pair was supplied.
    """
    times: np.ndarray
    states: np.ndarray
    z_values: np.ndarray
    outputs: np.ndarray
    selections: np.ndarray
    z_forces: np.ndarray
    h_values: np.ndarray
    dist_to_star: np.ndarray
    reference: Optional[np.ndarray] = None
    step_h: float = 0.0

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_z(self) -> np.ndarray:
        return self.z_values[-1]

    @property
    def final_output(self) -> np.ndarray:
        return self.outputs[-1]

    @classmethod
    def empty(cls, state_dim: int = 0, input_dim: int = 0) -> 'Trajectory':
        return cls(np.zeros(0), np.zeros((0, state_dim)), np.zeros((0, input_dim)),
                   np.zeros((0, input_dim)), np.zeros((0, state_dim)), np.zeros((0, input_dim)),
                   np.zeros(0), np.zeros(0))

    def to_rows(self) -> List[List[float]]:
        """Rows t, x..., z..., y..., h_value, dist_to_star (NaN marks a blank cell)."""
        rows = []
        for k in range(len(self.times)):
            dist = self.dist_to_star[k] if len(self.dist_to_star) else np.nan
            rows.append([float(self.times[k])] + self.states[k].tolist() + self.z_values[k].tolist()
                        + self.outputs[k].tolist() + [float(self.h_values[k]), float(dist)])
        return rows


class _Recorder:
    """Accumulates samples while marching and freezes them into a Trajectory."""

    def __init__(self, plant: Plant, reference: np.ndarray, step_h: float,
                 target: Optional[SteadyStatePair]):
        self.plant = plant
        self.reference = reference
        self.step_h = step_h
        self.target = target
        self.columns: Dict[str, list] = {key: [] for key in
                                         ('t', 'x', 'z', 'y', 'f', 'w', 'h', 'd')}

    def record(self, t: float, x: np.ndarray, z: np.ndarray, f: np.ndarray, w: np.ndarray,
               first: bool = False):
        plant = self.plant
        c = self.columns
        c['t'].append(t)
        c['x'].append(x)
        c['z'].append(z)
        c['y'].append(plant.output(x, z))
        c['f'].append(f)
        c['w'].append(w)
        if self.target is None:
            c['h'].append(np.nan)
            return
        x_star, u_star = self.target.x_star, self.target.u_star
        if first:
            c['h'].append(np.nan)
        else:
            c['h'].append(dissipation_h(plant, x, z, f, x_star, u_star, np.zeros_like(x_star)))
        c['d'].append(product_distance(plant, x, z, x_star, u_star))

    def freeze(self) -> Trajectory:
        c = self.columns
        state_dim, input_dim = self.plant.state_dim, self.plant.input_dim
        return Trajectory(
            times=np.array(c['t'], dtype=float),
            states=np.array(c['x'], dtype=float).reshape(-1, state_dim),
            z_values=np.array(c['z'], dtype=float).reshape(-1, input_dim),
            outputs=np.array(c['y'], dtype=float).reshape(-1, input_dim),
            selections=np.array(c['f'], dtype=float).reshape(-1, state_dim),
            z_forces=np.array(c['w'], dtype=float).reshape(-1, input_dim),
            h_values=np.array(c['h'], dtype=float),
            dist_to_star=np.array(c['d'], dtype=float),
            reference=self.reference,
            step_h=self.step_h,
        )


def _implicit_once(plant: Plant, cfg: ClosedLoopConfig, h: float,
                   x_prev: np.ndarray, z_prev: np.ndarray):
    step = plant.coupled_resolvent(h, x_prev, z_prev, cfg.reference_r, cfg.constraint_K,
                                   cfg.solver_tol, cfg.solver_max_iter)
    return step.x, step.z, step.force


def _splitting_once(plant: Plant, cfg: ClosedLoopConfig, h: float,
                    x_prev: np.ndarray, z_prev: np.ndarray):
    x_next = plant.state_resolvent(h, x_prev, z_prev, cfg.solver_tol, cfg.solver_max_iter)
    drift = cfg.reference_r - plant.output(x_next, z_prev)
    return x_next, cfg.constraint_K.project(z_prev + h * drift), None


def _with_retry(once, plant: Plant, cfg: ClosedLoopConfig, x_prev: np.ndarray,
                z_prev: np.ndarray):
    """
    Run one step of size h, or two of size h/2 when the inner solve fails.

    Returns (x_next, z_next, force); force is None after a retry, since the
    half-step forces do not belong to the full step.
    """
    h = cfg.step_h
    try:
        return once(plant, cfg, h, x_prev, z_prev)
    except ConvergenceError as e:
        logger.warning("step failed (%s); retrying with two half steps", e)
    x_mid, z_mid, _ = once(plant, cfg, 0.5 * h, x_prev, z_prev)
    x_next, z_next, _ = once(plant, cfg, 0.5 * h, x_mid, z_mid)
    return x_next, z_next, None


def step_implicit(plant: Plant, cfg: ClosedLoopConfig, x_prev: np.ndarray,
                  z_prev: np.ndarray) -> StepResult:
    """
    One fully implicit Euler step of the closed loop through the plant's coupled resolvent.

    Args:
        plant: The plant
        cfg: Closed-loop configuration
        x_prev: Previous state
        z_prev: Previous integrator state (in K)

    Returns:
        StepResult with the new state, the new integrator state, the realized
        selection (x_next - x_prev)/h and the realized normal-cone element

    Raises:
        ConvergenceError: If the inner solve fails for h and again for the two half steps
    """
    h = cfg.step_h
    x_next, z_next, force = _with_retry(_implicit_once, plant, cfg, x_prev, z_prev)
    if force is None:
        force = cfg.reference_r - plant.output(x_next, z_next) - (z_next - z_prev) / h
    return StepResult(x_next, z_next, (x_next - x_prev) / h, force)


def step_splitting(plant: Plant, cfg: ClosedLoopConfig, x_prev: np.ndarray,
                   z_prev: np.ndarray) -> StepResult:
    """
    One projected semi-implicit step: implicit plant step with z frozen, then
    z_next = P_K(z_prev + h (r - g(x_next, z_prev))).
    """
    h = cfg.step_h
    x_next, z_next, _ = _with_retry(_splitting_once, plant, cfg, x_prev, z_prev)
    force = cfg.reference_r - plant.output(x_next, z_prev) - (z_next - z_prev) / h
    return StepResult(x_next, z_next, (x_next - x_prev) / h, force)


STEPPERS = {
    Scheme.IMPLICIT: step_implicit,
    Scheme.SPLITTING: step_splitting,
}


def _initial_z(cfg: ClosedLoopConfig, z0: Any) -> np.ndarray:
    z = as_vector(z0)
    K = cfg.constraint_K
    if z.shape[0] != K.dim:
        raise DimensionMismatchError(K.dim, z.shape[0], "z0")
    distance = K.distance(z)
    if distance == 0.0:
        return z
    if distance <= Z0_PROJECTION_TOL:
        logger.warning("z0 is %.2e outside K; projecting it", distance)
        return K.project(z)
    raise ValueError(f"z0 = {z.tolist()} lies outside K (distance {distance:.3e}); "
                     "the projected integrator needs z(0) in K")


def simulate(plant: Plant, cfg: ClosedLoopConfig, x0: Any, z0: Any,
             target: Optional[SteadyStatePair] = None,
             progress: Optional[Callable[[int, int], None]] = None) -> Trajectory:
    """
    March the closed loop over [0, T] with a fixed step.

    Args:
        plant: The plant
        cfg: Closed-loop configuration
        x0: Initial state
        z0: Initial integrator state; projected onto K when within 1e-9 of it
        target: Optional steady-state pair for h values and distances
        progress: Optional callback receiving (step, total)

    Returns:
        Trajectory including t = 0

    Raises:
        ValueError: If z0 lies outside K or x0 is not finite
        SimulationError: If a step fails; the partial trajectory is attached
    """
    x = plant.check_state(x0)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    if cfg.reference_r.shape[0] != plant.output_dim:
        raise DimensionMismatchError(plant.output_dim, cfg.reference_r.shape[0], "reference")
    z = _initial_z(cfg, z0)
    stepper = STEPPERS[cfg.scheme]
    total = cfg.n_steps

    recorder = _Recorder(plant, cfg.reference_r, cfg.step_h, target)
    recorder.record(0.0, x, z, np.full(plant.state_dim, np.nan), np.zeros(plant.input_dim), first=True)
    for k in range(1, total + 1):
        try:
            result = stepper(plant, cfg, x, z)
        except (ConvergenceError, np.linalg.LinAlgError) as e:
            raise SimulationError(f"step {k} failed: {e}", recorder.freeze(), k) from e
        x, z = result.x, result.z
        recorder.record(k * cfg.step_h, x, z, result.selection, result.z_force)
        if progress is not None:
            progress(k, total)
    return recorder.freeze()


def simulate_open_loop(plant: Plant, step_h: float, x0: Any, inputs: Sequence[Any],
                       tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """
    Implicit Euler of x' in A(x, u_k) for a given input sequence.

    Returns:
        Array of states, one row per input sample plus the initial state
    """
    x = plant.check_state(x0)
    states = [x]
    for u in inputs:
        x = plant.state_resolvent(step_h, x, plant.check_input(u), tol, max_iter)
        states.append(x)
    return np.array(states)
