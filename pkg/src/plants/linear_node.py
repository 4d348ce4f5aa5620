"""
Strictified Linear System Node
Finite-dimensional impedance-passive node made strictly output passive by output feedback
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from core.convex_sets import Ball, Box, ConvexSet
from core.errors import ConvergenceError
from core.inclusion import DomainPoint, Plant, ResolventStep, SteadyStatePair

logger = logging.getLogger(__name__)

SKEW_TOL = 1e-12
PASSIVITY_PROBE_SAMPLES = 32
PASSIVITY_PROBE_TOL = 1e-10
L2_BOUND_SLACK = 1e-6
FIXED_POINT_MIN_ITER = 20000
BRANCH_TOL = 1e-10
STEP_CACHE_SIZE = 16


def _matrix(values: Any, rows: int, name: str) -> np.ndarray:
    mat = np.asarray(values, dtype=float)
    if mat.ndim == 1 and rows > 0:
        mat = mat.reshape(rows, -1)
    if mat.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return mat


@dataclass(frozen=True, eq=False)
class NodeParams:
    """Skew part S, damping D, control operator B and output feedback gain k."""
    S: np.ndarray
    D: np.ndarray
    B: np.ndarray
    feedback_k: float

    def __post_init__(self):
        S = _matrix(self.S, 0, "S")
        n = S.shape[0]
        if S.shape != (n, n):
            raise ValueError(f"S must be square, got shape {S.shape}")
        D = np.zeros((n, 0)) if self.D is None or np.size(self.D) == 0 else _matrix(self.D, n, "D")
        B = _matrix(self.B, n, "B")
        if D.shape[0] != n or B.shape[0] != n:
            raise ValueError(f"D and B need {n} rows")
        if np.linalg.norm(S + S.T) > SKEW_TOL:
            raise ValueError("S must be skew-symmetric")
        if not (np.isfinite(self.feedback_k) and self.feedback_k > 0):
            raise ValueError("feedback gain k must be positive")
        if B.shape[1] == 0 or np.linalg.matrix_rank(B) < B.shape[1]:
            raise ValueError("B must have full column rank (trivial kernel)")
        object.__setattr__(self, 'S', S)
        object.__setattr__(self, 'D', D)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'feedback_k', float(self.feedback_k))

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop_matrix(self) -> np.ndarray:
        """A_cl = S - D D^T - k B B^T."""
        return self.S - self.D @ self.D.T - self.feedback_k * self.B @ self.B.T


def observability_matrix(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


class LinearNodePlant(Plant):
    """
    x' = A_cl x + B u, y = B^T x on R^n with the Euclidean metric.

    The plant is single valued, so its principal section is the vector field itself.
    """

    name = 'linear_node'

    def __init__(self, params: NodeParams):
        self.params = params
        self.A = params.closed_loop_matrix()
        self.B = params.B
        self._step_cache: Dict[float, np.ndarray] = {}

    @property
    def state_dim(self) -> int:
        return self.params.n

    @property
    def input_dim(self) -> int:
        return self.params.m

    def state_metric(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(a, b))

    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.B.T @ np.asarray(x, dtype=float)

    def principal_section(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float)

    def steady_state(self, u_star: np.ndarray) -> np.ndarray:
        """x_star = -A_cl^{-1} B u_star."""
        return -np.linalg.solve(self.A, self.B @ np.asarray(u_star, dtype=float))

    def steady_gain(self) -> np.ndarray:
        """Matrix of the steady-state map u -> B^T x_star, i.e. -B^T A_cl^{-1} B."""
        return -self.B.T @ np.linalg.solve(self.A, self.B)

    def dissipation_h(self, x1, u1, f1, x2, u2, f2) -> float:
        """||D^T dx||^2 + k ||B^T dx||^2."""
        dx = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
        damping = self.params.D.T @ dx
        dy = self.B.T @ dx
        return float(damping @ damping + self.params.feedback_k * dy @ dy)

    def sample_point(self, rng: np.random.Generator) -> DomainPoint:
        x = rng.normal(size=self.state_dim)
        u = rng.normal(size=self.input_dim)
        return DomainPoint(x, u, self.principal_section(x, u))

    def sample_state(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        return rng.normal(scale=scale, size=self.state_dim)

    def step_matrix(self, h: float) -> np.ndarray:
        """P = (I - h A_cl)^{-1}, cached for the STEP_CACHE_SIZE most recent step sizes."""
        if h in self._step_cache:
            self._step_cache[h] = self._step_cache.pop(h)
        else:
            if len(self._step_cache) >= STEP_CACHE_SIZE:
                self._step_cache.pop(next(iter(self._step_cache)))
            self._step_cache[h] = np.linalg.inv(np.eye(self.state_dim) - h * self.A)
        return self._step_cache[h]

    def state_resolvent(self, h: float, x_prev: np.ndarray, u: np.ndarray,
                        tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        return self.step_matrix(h) @ (np.asarray(x_prev, dtype=float) + h * self.B @ np.asarray(u, dtype=float))

    def coupled_resolvent(self, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                          r: np.ndarray, K: ConvexSet,
                          tol: float = 1e-12, max_iter: int = 100) -> ResolventStep:
        return node_coupled_resolvent(self, h, x_prev, z_prev, r, K, tol, max_iter)

    def describe(self) -> Dict[str, Any]:
        info = super().describe()
        info.update({'k': self.params.feedback_k, 'damping_rank': self.params.D.shape[1]})
        return info


def _solve_box_by_faces(M: np.ndarray, q: np.ndarray, h: float, K: Box) -> Optional[Tuple[np.ndarray, np.ndarray, str]]:
    """Enumerate free/lower/upper patterns, fewest active constraints first."""
    m = M.shape[0]
    patterns = sorted(itertools.product(('free', 'lower', 'upper'), repeat=m),
                      key=lambda p: sum(s != 'free' for s in p))
    for pattern in patterns:
        z = np.zeros(m)
        active = [i for i, s in enumerate(pattern) if s != 'free']
        free = [i for i, s in enumerate(pattern) if s == 'free']
        bounds_ok = True
        for i in active:
            z[i] = K.lower[i] if pattern[i] == 'lower' else K.upper[i]
            bounds_ok &= bool(np.isfinite(z[i]))
        if not bounds_ok:
            continue
        if free:
            rhs = q[free] - M[np.ix_(free, active)] @ z[active]
            z[free] = np.linalg.solve(M[np.ix_(free, free)], rhs)
        w = np.zeros(m)
        w[active] = (q[active] - M[active] @ z) / h
        slack = BRANCH_TOL * (1.0 + np.max(np.abs(z)) + np.max(np.abs(w)))
        if np.any(z[free] < K.lower[free] - slack) or np.any(z[free] > K.upper[free] + slack):
            continue
        if any(w[i] > slack for i in active if pattern[i] == 'lower'):
            continue
        if any(w[i] < -slack for i in active if pattern[i] == 'upper'):
            continue
        return np.clip(z, K.lower, K.upper), w, '/'.join(pattern)
    return None


def _solve_ball_radial(M: np.ndarray, q: np.ndarray, h: float, K: Ball) -> Tuple[np.ndarray, np.ndarray, str]:
    """Radial KKT: (M + h mu I) z = q + h mu c with mu >= 0 and ||z - c|| = R when mu > 0."""
    c, radius = K.center, K.radius
    z_free = np.linalg.solve(M, q)
    if np.linalg.norm(z_free - c) <= radius:
        return z_free, np.zeros_like(z_free), 'interior'
    eye = np.eye(M.shape[0])
    offset = q - M @ c

    def excess(mu: float) -> float:
        return float(np.linalg.norm(np.linalg.solve(M + h * mu * eye, offset))) - radius

    mu_hi = 1.0
    while excess(mu_hi) > 0:
        mu_hi *= 2.0
        if mu_hi > 1e300:
            raise ConvergenceError("radial KKT bracket for the ball constraint diverged", 0)
    mu = brentq(excess, 0.0, mu_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    z = c + np.linalg.solve(M + h * mu * eye, offset)
    return K.project(z), mu * (z - c), 'boundary'


def _solve_fixed_point(M: np.ndarray, q: np.ndarray, K: ConvexSet, z0: np.ndarray,
                       tol: float, max_iter: int) -> Tuple[np.ndarray, int]:
    """Projected iteration z <- P_K(z - tau (M z - q)) with tau = mu / L^2."""
    sym = 0.5 * (M + M.T)
    mu = float(np.min(np.linalg.eigvalsh(sym)))
    lipschitz = float(np.linalg.norm(M, 2))
    tau = mu / lipschitz ** 2
    z = K.project(z0)
    change = np.inf
    limit = max(max_iter, FIXED_POINT_MIN_ITER)
    for iteration in range(1, limit + 1):
        z_next = K.project(z - tau * (M @ z - q))
        change = float(np.linalg.norm(z_next - z))
        z = z_next
        if change <= tol * (1.0 + float(np.linalg.norm(z))):
            return z, iteration
    raise ConvergenceError("projected fixed-point iteration did not converge", limit, change)


def node_coupled_resolvent(plant: LinearNodePlant, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                           r: np.ndarray, K: ConvexSet, tol: float = 1e-12,
                           max_iter: int = 100) -> ResolventStep:
    """
    Exact implicit step of the node in closed loop with the projected integrator.

    With P = (I - h A_cl)^{-1} the state is x = P (x_prev + h B z), and z solves
    the variational inequality M z + h w = q, w in N_K(z), where
    M = I + h^2 B^T P B and q = z_prev + h r - h B^T P x_prev.

    Boxes with m <= 2 are solved by enumerating their faces, balls by the radial
    KKT condition and everything else by a projected fixed-point iteration.

    Returns:
        ResolventStep whose force is the realized multiplier w = (q - M z)/h

    Raises:
        ConvergenceError: If the fixed-point iteration does not converge
    """
    x_prev = np.asarray(x_prev, dtype=float)
    z_prev = np.asarray(z_prev, dtype=float)
    P = plant.step_matrix(h)
    B = plant.B
    M = np.eye(plant.input_dim) + h * h * B.T @ P @ B
    q = z_prev + h * np.asarray(r, dtype=float) - h * B.T @ P @ x_prev

    solved = None
    if isinstance(K, Box) and K.dim <= 2:
        solved = _solve_box_by_faces(M, q, h, K)
        if solved is None:
            logger.debug("face enumeration found no consistent pattern; falling back to fixed point")
    elif isinstance(K, Ball):
        solved = _solve_ball_radial(M, q, h, K)
    if solved is None:
        z, iterations = _solve_fixed_point(M, q, K, z_prev, tol, max_iter)
        logger.debug("node step fixed point converged in %d iterations", iterations)
        branch = 'fixed-point'
    else:
        z, _, branch = solved

    x = P @ (x_prev + h * B @ z)
    force = (q - M @ z) / h
    return ResolventStep(x=x, z=z, force=force, branch=branch)


def _passivity_probe(params: NodeParams, A: np.ndarray, seed: int = 0) -> float:
    """Worst value of k ||y||^2 - (<u, y> - <A x + B u, x>) over random samples; <= 0 when strict."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(PASSIVITY_PROBE_SAMPLES):
        x = rng.normal(size=params.n)
        u = rng.normal(size=params.m)
        y = params.B.T @ x
        supplied = float(u @ y) - float((A @ x + params.B @ u) @ x)
        gap = params.feedback_k * float(y @ y) - supplied
        worst = max(worst, gap / (1.0 + float(x @ x) + float(u @ u)))
    return worst


def build_strictified_node(S: Any, D: Any, B: Any, k: float) -> LinearNodePlant:
    """
    Fold the output feedback u -> u - k y into the node x' = (S - D D^T) x + B u.

    Args:
        S: Skew-symmetric n x n matrix
        D: Damping matrix n x q (may have zero columns)
        B: Control operator n x m with trivial kernel
        k: Feedback gain, the strict output passivity constant

    Returns:
        LinearNodePlant with A_cl = S - D D^T - k B B^T and y = B^T x

    Raises:
        ValueError: If a parameter is invalid, A_cl is singular, the
            observability rank test fails or the passivity probe fails
    """
    params = NodeParams(S, D, B, k)
    A = params.closed_loop_matrix()
    n = params.n
    if np.linalg.matrix_rank(A) < n:
        raise ValueError("A_cl = S - DD^T - kBB^T is singular")
    rank = np.linalg.matrix_rank(observability_matrix(A, params.B.T))
    if rank < n:
        raise ValueError(f"(A_cl, B^T) is not observable: rank {rank} < {n}")
    gap = _passivity_probe(params, A)
    if gap > PASSIVITY_PROBE_TOL:
        raise ValueError(f"strict output passivity probe failed with gap {gap:.3e}")
    return LinearNodePlant(params)


def random_strictified_node(n: int, m: int, q: int, k: float, seed: int,
                            max_attempts: int = 100) -> LinearNodePlant:
    """
    Draw a random strictified node that passes the build checks.

    Args:
        n: State dimension
        m: Input/output dimension
        q: Number of damping columns
        k: Feedback gain
        seed: Seed of the numpy generator

    Returns:
        LinearNodePlant
    """
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        G = rng.normal(size=(n, n))
        S = (G - G.T) / np.sqrt(2.0 * n)
        D = 0.5 * rng.normal(size=(n, q))
        B = rng.normal(size=(n, m)) / np.sqrt(n)
        try:
            return build_strictified_node(S, D, B, k)
        except ValueError as e:
            logger.debug("random node attempt %d rejected: %s", attempt, e)
    raise ValueError(f"no valid random node after {max_attempts} attempts")


@dataclass
class L2BoundReport:
    """Both sides of the tail bound int_T ||y - r||^2 dt <= (1/2k) d(T)^2."""
    lhs: float
    rhs: float
    T_index: int
    slack: float = L2_BOUND_SLACK

    @property
    def margin(self) -> float:
        return self.rhs + self.slack - self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + self.slack


def node_l2_bound_check(trajectory, pair: SteadyStatePair, k: float, T_index: int) -> L2BoundReport:
    """
    Check the L2 tracking bound on a trajectory tail.

    Args:
        trajectory: Trajectory of the node (identity state metric)
        pair: Steady-state pair the loop converges to
        k: Strict output passivity constant
        T_index: Sample index where the tail starts

    Returns:
        L2BoundReport with the trapezoid integral and the energy bound
    """
    if not 0 <= T_index < len(trajectory):
        raise IndexError(f"T_index {T_index} outside the trajectory of length {len(trajectory)}")
    reference = trajectory.reference
    errors = trajectory.outputs[T_index:] - reference
    squared = np.sum(errors ** 2, axis=1)
    times = trajectory.times[T_index:]
    lhs = float(trapezoid(squared, times)) if len(times) > 1 else 0.0
    dx = trajectory.states[T_index] - pair.x_star
    dz = trajectory.z_values[T_index] - pair.u_star
    rhs = float(dx @ dx + dz @ dz) / (2.0 * k)
    return L2BoundReport(lhs=lhs, rhs=rhs, T_index=T_index)


def build_linear_node(block: Dict[str, Any]) -> LinearNodePlant:
    """
    Build from a config block.

    Either explicit matrices {"S": ..., "D": ..., "B": ..., "k": ...} or
    {"random": {"n": 6, "m": 2, "q": 2, "seed": 7}, "k": ...}.
    """
    k = float(block.get('k', 1.0))
    if 'random' in block:
        draw = block['random']
        return random_strictified_node(int(draw['n']), int(draw['m']), int(draw.get('q', 1)), k,
                                       int(draw.get('seed', 0)))
    missing = [name for name in ('S', 'B') if name not in block]
    if missing:
        raise ValueError(f"linear_node block is missing {', '.join(missing)}")
    return build_strictified_node(block['S'], block.get('D'), block['B'], k)
