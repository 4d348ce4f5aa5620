"""
Plant Contract Module
Abstract plants x' in A(x, u), y = g(x, u) with their steady states and internal dissipation
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .convex_sets import Box, ConvexSet, as_vector
from .errors import ConvergenceError, DimensionMismatchError, InfeasibleReferenceError

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-10
FEASIBILITY_TOL = 1e-8
H_NEGATIVE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SteadyStatePair:
    """A constant input u_star and its equilibrium x_star, 0 in A(x_star, u_star)."""
    x_star: np.ndarray
    u_star: np.ndarray
    residual: float = 0.0


@dataclass(frozen=True, eq=False)
class ResolventStep:
    """Solution of one implicit Euler step of the closed loop."""
    x: np.ndarray
    z: np.ndarray
    force: np.ndarray
    branch: str = ''


@dataclass(frozen=True, eq=False)
class DomainPoint:
    """A point of the graph of A: state, input and one selection of A(x, u)."""
    x: np.ndarray
    u: np.ndarray
    f: np.ndarray


class Plant(ABC):
    """
    Capability bundle of an impedance-passive plant.

    Subclasses provide the state metric, the output map, the implicit steps
    (open loop and coupled with the projected integrator), the steady-state
    map and the closed-form internal dissipation h.
    """

    name = 'plant'

    @property
    @abstractmethod
    def state_dim(self) -> int:
        pass

    @property
    @abstractmethod
    def input_dim(self) -> int:
        """Input dimension; equals the output dimension."""

    @property
    def output_dim(self) -> int:
        return self.input_dim

    @abstractmethod
    def state_metric(self, a: np.ndarray, b: np.ndarray) -> float:
        """Inner product inducing the state norm."""

    def state_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.state_metric(a, a), 0.0)))

    @abstractmethod
    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def principal_section(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Minimal-norm selection of A(x, u)."""

    @abstractmethod
    def state_resolvent(self, h: float, x_prev: np.ndarray, u: np.ndarray,
                        tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Solve (x - x_prev)/h in A(x, u) with the input held constant."""

    @abstractmethod
    def coupled_resolvent(self, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                          r: np.ndarray, K: ConvexSet,
                          tol: float = 1e-12, max_iter: int = 100) -> ResolventStep:
        """
        Solve the implicit Euler step of the closed loop.

        (x - x_prev)/h in A(x, z) and (z - z_prev)/h in r - g(x, z) - N_K(z).
        """

    @abstractmethod
    def steady_state(self, u_star: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def dissipation_h(self, x1: np.ndarray, u1: np.ndarray, f1: np.ndarray,
                      x2: np.ndarray, u2: np.ndarray, f2: np.ndarray) -> float:
        """Closed-form internal dissipation for two points of the graph of A."""

    @abstractmethod
    def sample_point(self, rng: np.random.Generator) -> DomainPoint:
        """Random point of the graph of A with a valid (not necessarily minimal) selection."""

    @abstractmethod
    def sample_state(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        """Random state in the closure of the domain."""

    def stationarity_residual(self, x: np.ndarray, u: np.ndarray) -> float:
        return self.state_norm(self.principal_section(x, u))

    def check_state(self, x: Any) -> np.ndarray:
        vec = as_vector(x)
        if vec.shape[0] != self.state_dim:
            raise DimensionMismatchError(self.state_dim, vec.shape[0], "state")
        return vec

    def check_input(self, u: Any) -> np.ndarray:
        vec = as_vector(u)
        if vec.shape[0] != self.input_dim:
            raise DimensionMismatchError(self.input_dim, vec.shape[0], "input")
        return vec

    def describe(self) -> Dict[str, Any]:
        return {'plant': self.name, 'state_dim': self.state_dim, 'input_dim': self.input_dim}


def product_distance(plant: Plant, x1: np.ndarray, z1: np.ndarray,
                     x2: np.ndarray, z2: np.ndarray) -> float:
    """Distance in the product metric ||x1 - x2||_X^2 + ||z1 - z2||^2."""
    dx = np.asarray(x1) - np.asarray(x2)
    dz = np.asarray(z1) - np.asarray(z2)
    return float(np.sqrt(max(plant.state_metric(dx, dx), 0.0) + float(dz @ dz)))


def steady_state(plant: Plant, u_star: Any, K: Optional[ConvexSet] = None,
                 tol: float = STATIONARITY_TOL) -> SteadyStatePair:
    """
    Compute the steady-state pair for a constant input.

    Args:
        plant: The plant
        u_star: Constant input (must lie in K when K is given)
        K: Optional constraint set used to check the input
        tol: Bound on the stationarity residual

    Returns:
        SteadyStatePair with the stationarity residual attached

    Raises:
        ValueError: If u_star lies outside K
        ConvergenceError: If the plant's stationary solver fails or the residual is too large
    """
    u = plant.check_input(u_star)
    if K is not None and not K.contains(u, 1e-12):
        raise ValueError(f"steady-state input {u.tolist()} lies outside K")
    x = plant.steady_state(u)
    residual = plant.stationarity_residual(x, u)
    scale = 1.0 + plant.state_norm(x) + float(np.linalg.norm(u))
    if not np.isfinite(residual) or residual > tol * scale:
        raise ConvergenceError("stationary solve left a residual in 0 in A(x, u)", 0, residual)
    return SteadyStatePair(x_star=x, u_star=u, residual=residual)


def steady_io(plant: Plant, u: Any) -> np.ndarray:
    """Steady-state input-output map u -> g(x_star(u), u)."""
    u_vec = plant.check_input(u)
    return plant.output(plant.steady_state(u_vec), u_vec)


def feasible_input(plant: Plant, r: Any, K: ConvexSet, tol: float = FEASIBILITY_TOL,
                   max_iter: int = 100) -> np.ndarray:
    """
    Find u_star in K whose steady-state output equals r.

    Scalar inputs on an interval use a bracketing root finder on the monotone
    steady-state map; otherwise a damped Newton iteration with a finite
    difference Jacobian is used and the root is checked against K.

    Args:
        plant: The plant
        r: Reference output
        K: Constraint set of the integrator
        tol: Bound on |g(x_star(u), u) - r|
        max_iter: Newton iteration limit

    Returns:
        The input u_star

    Raises:
        InfeasibleReferenceError: If no input in K attains r
        ConvergenceError: If the Newton iteration fails
    """
    r_vec = as_vector(r)
    if r_vec.shape[0] != plant.output_dim:
        raise DimensionMismatchError(plant.output_dim, r_vec.shape[0], "reference")
    if K.dim != plant.input_dim:
        raise DimensionMismatchError(plant.input_dim, K.dim, "constraint set")

    if plant.input_dim == 1 and isinstance(K, Box) and np.all(np.isfinite(K.lower)) \
            and np.all(np.isfinite(K.upper)):
        return _feasible_scalar(plant, r_vec, K, tol)
    return _feasible_newton(plant, r_vec, K, tol, max_iter)


def _feasible_scalar(plant: Plant, r: np.ndarray, K: Box, tol: float) -> np.ndarray:
    lo, hi = float(K.lower[0]), float(K.upper[0])

    def gap(u: float) -> float:
        return float(steady_io(plant, [u])[0] - r[0])

    gap_lo, gap_hi = gap(lo), gap(hi)
    if abs(gap_lo) <= tol:
        return np.array([lo])
    if abs(gap_hi) <= tol:
        return np.array([hi])
    if gap_lo > 0 or gap_hi < 0:
        raise InfeasibleReferenceError(r, (gap_lo + r[0], gap_hi + r[0]))
    u = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(gap(u)) > tol:
        raise ConvergenceError("bracketing search for the feasible input stalled", 200, abs(gap(u)))
    return np.array([u])


def _feasible_newton(plant: Plant, r: np.ndarray, K: ConvexSet, tol: float,
                     max_iter: int) -> np.ndarray:
    u = K.project(np.zeros(plant.input_dim))
    residual = steady_io(plant, u) - r
    norm = float(np.linalg.norm(residual))
    for iteration in range(max_iter):
        if norm <= tol:
            break
        jac = np.empty((plant.output_dim, plant.input_dim))
        for j in range(plant.input_dim):
            step = 1e-6 * max(1.0, abs(u[j]))
            bumped = u.copy()
            bumped[j] += step
            jac[:, j] = (steady_io(plant, bumped) - r - residual) / step
        direction = np.linalg.solve(jac, -residual)
        # halve until the residual decreases
        t = 1.0
        for _ in range(40):
            trial = u + t * direction
            trial_residual = steady_io(plant, trial) - r
            trial_norm = float(np.linalg.norm(trial_residual))
            if trial_norm < norm:
                break
            t *= 0.5
        else:
            raise ConvergenceError("damped Newton for the feasible input found no descent", iteration, norm)
        u, residual, norm = trial, trial_residual, trial_norm
        logger.debug("feasible_input Newton iteration %d: residual %.3e", iteration, norm)
    if norm > tol:
        raise ConvergenceError("damped Newton for the feasible input did not converge", max_iter, norm)
    if not K.contains(u, 1e-9):
        raise InfeasibleReferenceError(r)
    return K.project(u)


def power_balance_dissipation(plant: Plant, x1: np.ndarray, u1: np.ndarray, f1: np.ndarray,
                              x2: np.ndarray, u2: np.ndarray, f2: np.ndarray) -> float:
    """Supplied incremental power minus incremental energy growth, <du, dg> - <df, dx>_X."""
    du = np.asarray(u1) - np.asarray(u2)
    dg = plant.output(x1, u1) - plant.output(x2, u2)
    return float(du @ dg) - plant.state_metric(np.asarray(f1) - np.asarray(f2), np.asarray(x1) - np.asarray(x2))


def dissipation_h(plant: Plant, x1: np.ndarray, u1: np.ndarray, f1: np.ndarray,
                  x2: np.ndarray, u2: np.ndarray, f2: np.ndarray) -> float:
    """
    Internal dissipation h between two points of the graph of A.

    Raises:
        ValueError: If the plant returns a value below -1e-9 (implementation bug)
    """
    value = plant.dissipation_h(x1, u1, f1, x2, u2, f2)
    if value < -H_NEGATIVE_TOL:
        raise ValueError(f"{plant.name}: negative internal dissipation {value:.3e}")
    return max(value, 0.0)


def passivity_margin(plant: Plant, first: DomainPoint, second: DomainPoint) -> float:
    """<df, dx>_X - <du, dg>; nonpositive for an incrementally passive plant."""
    return -power_balance_dissipation(plant, first.x, first.u, first.f, second.x, second.u, second.f)


@dataclass
class DissipativityReport:
    """Outcome of sampling the incremental passivity inequality."""
    plant: str
    samples: int
    worst_margin: float
    tolerance: float
    failures: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def probe_dissipativity(plant: Plant, samples: int = 100, rng_seed: int = 0,
                        tolerance: float = 1e-9) -> DissipativityReport:
    """
    Sample pairs of graph points and check <df, dx>_X <= <du, dg> + tolerance.

    Args:
        plant: The plant
        samples: Number of sampled pairs
        rng_seed: Seed of the numpy generator
        tolerance: Allowed positive margin

    Returns:
        Report with the worst margin and the indices of failing samples
    """
    rng = np.random.default_rng(rng_seed)
    worst = -np.inf
    failures = []
    for i in range(samples):
        margin = passivity_margin(plant, plant.sample_point(rng), plant.sample_point(rng))
        worst = max(worst, margin)
        if margin > tolerance:
            failures.append(i)
    return DissipativityReport(plant.name, samples, float(worst), tolerance, failures)


def sample_steady_pairs(plant: Plant, K: ConvexSet, n_pairs: int,
                        rng: np.random.Generator) -> List[Tuple[np.ndarray, np.ndarray]]:
    pairs = []
    while len(pairs) < n_pairs:
        u1, u2 = K.sample(rng, 2)
        if np.linalg.norm(u1 - u2) > 1e-9:
            pairs.append((u1, u2))
    return pairs
