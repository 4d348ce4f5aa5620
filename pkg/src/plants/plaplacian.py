"""
Boundary-Controlled p-Laplacian Plant
1-D finite-volume discretization of w_t = (w_x^{p-1})_x - w^{p-1} with Neumann flux control
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded

from core.convex_sets import Box, ConvexSet, as_vector
from core.errors import ConvergenceError, DimensionMismatchError
from core.inclusion import DomainPoint, Plant, ResolventStep

logger = logging.getLogger(__name__)

MIN_GRID = 8
JACOBIAN_FLOOR = 1e-12
MAX_HALVINGS = 40
STEADY_NEWTON_TOL = 1e-11
NEWTON_MAX_ITER = 50
ROUNDOFF_ULPS = 64
BRANCH_TOL = 1e-9

Penalty = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class PdeParams:
    """Even exponent p and the number of grid nodes on [0, 1], end points included."""
    p: int = 4
    n_grid: int = 200

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 2 or self.p % 2:
            raise ValueError(f"p must be an even integer >= 2, got {self.p}")
        if int(self.n_grid) != self.n_grid or self.n_grid < MIN_GRID:
            raise ValueError(f"n_grid must be an integer >= {MIN_GRID}, got {self.n_grid}")
        object.__setattr__(self, 'p', int(self.p))
        object.__setattr__(self, 'n_grid', int(self.n_grid))

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_grid - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_grid)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights, the lumped mass of each node."""
        m = np.full(self.n_grid, self.dx)
        m[0] = m[-1] = 0.5 * self.dx
        return m

    def refined(self) -> 'PdeParams':
        """Same problem with the spacing halved."""
        return PdeParams(self.p, 2 * (self.n_grid - 1) + 1)


def _penalties(mu: Penalty) -> np.ndarray:
    values = np.broadcast_to(np.asarray(mu, dtype=float), (2,)).copy()
    if np.any(values < 0):
        raise ValueError("boundary penalty mu must be nonnegative")
    return values


def boundary_load(params: PdeParams, u: Any) -> np.ndarray:
    """N u: the flux u_L enters at node 0 and u_R at the last node."""
    u = as_vector(u)
    if u.shape[0] != 2:
        raise DimensionMismatchError(2, u.shape[0], "boundary input")
    load = np.zeros(params.n_grid)
    load[0] += u[0]
    load[-1] += u[1]
    return load


def weak_duality_map(params: PdeParams, lam: float, mu: Penalty, w: np.ndarray) -> np.ndarray:
    """
    Phi_{lam,mu}(w) tested against the nodal hat functions.

    Flux differences of (w_x)^{p-1}, the lumped reaction m w^{p-1} + lam m w and
    the boundary penalty mu w at the two end nodes.
    """
    w = np.asarray(w, dtype=float)
    p, dx, m = params.p, params.dx, params.weights
    flux = (np.diff(w) / dx) ** (p - 1)
    out = m * w ** (p - 1) + lam * m * w
    out[:-1] -= flux
    out[1:] += flux
    penalty = _penalties(mu)
    out[0] += penalty[0] * w[0]
    out[-1] += penalty[1] * w[-1]
    return out


def apply_duality_map(params: PdeParams, lam: float, mu: Penalty, w: np.ndarray,
                      boundary_u: Any) -> np.ndarray:
    """Nodal residual (Phi_{lam,mu}(w) - N u) / m; a constant field c gives c^{p-1} (+ lam c) everywhere."""
    return (weak_duality_map(params, lam, mu, w) - boundary_load(params, boundary_u)) / params.weights


def _jacobian_bands(params: PdeParams, lam: float, penalty: np.ndarray, w: np.ndarray) -> np.ndarray:
    p, dx, m = params.p, params.dx, params.weights
    grad = np.diff(w) / dx
    stiffness = np.maximum((p - 1) * grad ** (p - 2), JACOBIAN_FLOOR) / dx
    reaction = np.maximum((p - 1) * w ** (p - 2), JACOBIAN_FLOOR)
    bands = np.zeros((3, params.n_grid))
    bands[1] = m * (reaction + lam)
    bands[1, :-1] += stiffness
    bands[1, 1:] += stiffness
    bands[1, 0] += penalty[0]
    bands[1, -1] += penalty[1]
    bands[0, 1:] = -stiffness
    bands[2, :-1] = -stiffness
    return bands


def _linear_guess(params: PdeParams, lam: float, penalty: np.ndarray, load: np.ndarray) -> np.ndarray:
    """Solve the p = 2 problem with the same data."""
    dx, m = params.dx, params.weights
    bands = np.zeros((3, params.n_grid))
    bands[1] = m * (1.0 + lam)
    bands[1, :-1] += 1.0 / dx
    bands[1, 1:] += 1.0 / dx
    bands[1, 0] += penalty[0]
    bands[1, -1] += penalty[1]
    bands[0, 1:] = -1.0 / dx
    bands[2, :-1] = -1.0 / dx
    return solve_banded((1, 1), bands, load)


def roundoff_floor(params: PdeParams, lam: float, mu: Penalty, w: np.ndarray, load: np.ndarray) -> float:
    """
    Smallest nodal residual double precision can certify for the field w.

    ROUNDOFF_ULPS machine epsilons of the largest nodal sum of absolute term
    magnitudes (fluxes, reaction, lam m w, penalty and load) plus the change of
    the residual under a one-ulp change of w, divided by m.
    """
    w = np.asarray(w, dtype=float)
    p, dx, m = params.p, params.dx, params.weights
    flux = np.abs(np.diff(w) / dx) ** (p - 1)
    size = m * np.abs(w) ** (p - 1) + lam * m * np.abs(w) + np.abs(load)
    size[:-1] += flux
    size[1:] += flux
    penalty = _penalties(mu)
    size[0] += penalty[0] * abs(w[0])
    size[-1] += penalty[1] * abs(w[-1])
    bands = np.abs(_jacobian_bands(params, lam, penalty, w))
    size += (bands[1] + np.append(bands[0, 1:], 0.0) + np.append(0.0, bands[2, :-1])) * np.abs(w)
    return float(ROUNDOFF_ULPS * np.finfo(float).eps * np.max(size / m))


def solve_monotone(params: PdeParams, lam: float, mu: Penalty, rhs: Any, u: Any,
                   newton_tol: float = STEADY_NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                   w0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Solve Phi_{lam,mu}(w) = m rhs + N u by Newton's method.

    The Jacobian is tridiagonal and solved with a banded LU; each step is
    damped by halving until the sup norm of the nodal residual decreases.

    Args:
        params: Grid parameters
        lam: Zeroth-order coefficient (1/h for an implicit step), >= 0
        mu: Boundary penalty, a scalar or one value per end point
        rhs: Nodal right-hand side (scalar or field)
        u: Boundary fluxes (u_L, u_R)
        newton_tol: Bound on the sup norm of the nodal residual, relative to 1 + sup|w|.
            When the line search stalls first, the residual must be below roundoff_floor
        max_iter: Newton iteration limit
        w0: Initial guess; defaults to the p = 2 solution

    Returns:
        Nodal field w

    Raises:
        ConvergenceError: If the iteration limit is reached or the line search fails
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    penalty = _penalties(mu)
    m = params.weights
    load = m * np.broadcast_to(np.asarray(rhs, dtype=float), (params.n_grid,)) + boundary_load(params, u)
    w = _linear_guess(params, lam, penalty, load) if w0 is None else np.array(w0, dtype=float)

    def residual_of(field: np.ndarray) -> np.ndarray:
        return weak_duality_map(params, lam, penalty, field) - load

    residual = residual_of(w)
    norm = float(np.max(np.abs(residual / m)))
    for iteration in range(max_iter + 1):
        threshold = newton_tol * (1.0 + float(np.max(np.abs(w))))
        if norm <= threshold:
            logger.debug("Newton converged in %d iterations (residual %.3e)", iteration, norm)
            return w
        if iteration == max_iter:
            break
        direction = solve_banded((1, 1), _jacobian_bands(params, lam, penalty, w), -residual)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            trial = w + t * direction
            trial_residual = residual_of(trial)
            trial_norm = float(np.max(np.abs(trial_residual / m)))
            if trial_norm < norm:
                break
            t *= 0.5
        else:
            floor = roundoff_floor(params, lam, penalty, w, load)
            if norm <= floor:
                logger.debug("Newton stalled at the roundoff floor %.3e (residual %.3e)", floor, norm)
                return w
            raise ConvergenceError("Newton line search found no decrease", iteration, norm)
        w, residual, norm = trial, trial_residual, trial_norm
    raise ConvergenceError("Newton iteration limit reached", max_iter, norm)


def pde_steady_state(params: PdeParams, u_star: Any, tol: float = STEADY_NEWTON_TOL) -> np.ndarray:
    """w_star = Phi^{-1}(N u_star)."""
    return solve_monotone(params, 0.0, 0.0, 0.0, u_star, newton_tol=tol)


def pde_output(params: PdeParams, w: np.ndarray) -> np.ndarray:
    """Boundary values (w(0), w(1))."""
    w = np.asarray(w, dtype=float)
    return np.array([w[0], w[-1]])


def pde_h(params: PdeParams, w1: np.ndarray, w2: np.ndarray) -> float:
    """
    Internal dissipation: quadrature of (g1^{p-1} - g2^{p-1})(g1 - g2) over the
    cells plus the lumped (w1^{p-1} - w2^{p-1})(w1 - w2).

    Raises:
        ValueError: If the value falls below -1e-9
    """
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    p, dx = params.p, params.dx
    g1, g2 = np.diff(w1) / dx, np.diff(w2) / dx
    gradient_part = dx * np.sum((g1 ** (p - 1) - g2 ** (p - 1)) * (g1 - g2))
    reaction_part = np.sum(params.weights * (w1 ** (p - 1) - w2 ** (p - 1)) * (w1 - w2))
    value = float(gradient_part + reaction_part)
    if value < -1e-9:
        raise ValueError(f"negative p-Laplacian dissipation {value:.3e}")
    return max(value, 0.0)


def hyperbolic_steady_state(u: Any, x: Any) -> np.ndarray:
    """
    Closed-form steady state for p = 2: w = a cosh(x) + b sinh(x)
    with b = -u_L and a = (u_R + u_L cosh 1) / sinh 1.
    """
    u_left, u_right = as_vector(u)
    b = -u_left
    a = (u_right + u_left * np.cosh(1.0)) / np.sinh(1.0)
    x = np.asarray(x, dtype=float)
    return a * np.cosh(x) + b * np.sinh(x)


def hyperbolic_error(params: PdeParams, u: Any) -> float:
    """Sup-norm distance between the discrete p = 2 steady state and the closed form."""
    if params.p != 2:
        raise ValueError("the hyperbolic closed form only holds for p = 2")
    w = pde_steady_state(params, u)
    return float(np.max(np.abs(w - hyperbolic_steady_state(u, params.nodes))))


def grid_convergence_ratio(params: PdeParams, u: Any) -> float:
    """Error ratio between the grid and its refinement; about 4 for a second-order scheme."""
    return hyperbolic_error(params, u) / hyperbolic_error(params.refined(), u)


class PLaplacianPlant(Plant):
    """
    Discretized p-Laplacian plant with two boundary inputs.

    State: nodal field w with the lumped L2 metric sum m_i a_i b_i.
    Input: boundary fluxes (u_L, u_R). Output: boundary values (w(0), w(1)).
    """

    name = 'plaplacian'

    def __init__(self, params: PdeParams):
        self.params = params
        self.weights = params.weights

    @property
    def state_dim(self) -> int:
        return self.params.n_grid

    @property
    def input_dim(self) -> int:
        return 2

    def check_state(self, x: Any) -> np.ndarray:
        """A scalar stands for the constant field."""
        if np.ndim(x) == 0:
            return np.full(self.state_dim, float(x))
        return super().check_state(x)

    def state_metric(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.weights * np.asarray(a, dtype=float) * np.asarray(b, dtype=float)))

    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return pde_output(self.params, x)

    def principal_section(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return -apply_duality_map(self.params, 0.0, 0.0, x, u)

    def steady_state(self, u_star: np.ndarray) -> np.ndarray:
        return pde_steady_state(self.params, u_star)

    def dissipation_h(self, x1, u1, f1, x2, u2, f2) -> float:
        return pde_h(self.params, x1, x2)

    def _smooth_field(self, rng: np.random.Generator, scale: float) -> np.ndarray:
        nodes = self.params.nodes
        c = rng.normal(scale=scale, size=4)
        return c[0] + c[1] * nodes + c[2] * np.cos(np.pi * nodes) + c[3] * np.sin(np.pi * nodes)

    def sample_point(self, rng: np.random.Generator) -> DomainPoint:
        w = self._smooth_field(rng, 1.0)
        u = rng.normal(size=2)
        return DomainPoint(w, u, self.principal_section(w, u))

    def sample_state(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        return self._smooth_field(rng, scale)

    def state_resolvent(self, h: float, x_prev: np.ndarray, u: np.ndarray,
                        tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Phi_{1/h,0}(w) = m w_prev / h + N u, warm-started at w_prev."""
        x_prev = np.asarray(x_prev, dtype=float)
        return solve_monotone(self.params, 1.0 / h, 0.0, x_prev / h, u,
                              newton_tol=max(tol, STEADY_NEWTON_TOL), max_iter=max_iter, w0=x_prev)

    def coupled_resolvent(self, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                          r: np.ndarray, K: ConvexSet,
                          tol: float = 1e-12, max_iter: int = 100) -> ResolventStep:
        if isinstance(K, Box):
            step = _coupled_box(self, h, x_prev, z_prev, r, K, tol, max_iter)
            if step is not None:
                return step
            logger.debug("no consistent active set; falling back to fixed-point alternation")
        return _coupled_alternation(self, h, x_prev, z_prev, r, K, tol, max_iter)

    def describe(self) -> Dict[str, Any]:
        info = super().describe()
        info.update({'p': self.params.p, 'n_grid': self.params.n_grid})
        return info


def _patterns(z_prev: np.ndarray, K: Box) -> List[Tuple[str, ...]]:
    def guess(i: int) -> str:
        if z_prev[i] <= K.lower[i]:
            return 'lower'
        if z_prev[i] >= K.upper[i]:
            return 'upper'
        return 'free'

    first = tuple(guess(i) for i in range(K.dim))
    rest = sorted((p for p in itertools.product(('free', 'lower', 'upper'), repeat=K.dim) if p != first),
                  key=lambda p: sum(s != 'free' for s in p))
    return [first] + rest


def _coupled_box(plant: PLaplacianPlant, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                 r: np.ndarray, K: Box, tol: float, max_iter: int) -> Optional[ResolventStep]:
    """
    Active-set solve of the coupled step for a box.

    A free integrator component z_j = z_prev_j + h (r_j - w_j) folds into the
    boundary equation as a penalty mu_j = h with flux z_prev_j + h r_j; a
    component held at a bound feeds that bound as the flux.
    """
    params = plant.params
    x_prev = np.asarray(x_prev, dtype=float)
    z_prev = as_vector(z_prev)
    r = as_vector(r)
    newton_tol = max(tol, STEADY_NEWTON_TOL)
    for pattern in _patterns(z_prev, K):
        penalty = np.zeros(2)
        flux = np.zeros(2)
        bounds_ok = True
        for j, state in enumerate(pattern):
            if state == 'free':
                penalty[j] = h
                flux[j] = z_prev[j] + h * r[j]
            else:
                flux[j] = K.lower[j] if state == 'lower' else K.upper[j]
                bounds_ok &= bool(np.isfinite(flux[j]))
        if not bounds_ok:
            continue
        w = solve_monotone(params, 1.0 / h, penalty, x_prev / h, flux,
                           newton_tol=newton_tol, max_iter=max_iter, w0=x_prev)
        y = pde_output(params, w)
        z = np.where(penalty > 0, z_prev + h * (r - y), flux)
        force = r - y - (z - z_prev) / h
        slack = BRANCH_TOL * (1.0 + float(np.max(np.abs(z))) + float(np.max(np.abs(y))))
        consistent = True
        for j, state in enumerate(pattern):
            if state == 'free':
                consistent &= bool(K.lower[j] - slack <= z[j] <= K.upper[j] + slack)
                force[j] = 0.0
            elif state == 'lower':
                consistent &= bool(force[j] <= slack)
            else:
                consistent &= bool(force[j] >= -slack)
        if consistent:
            logger.debug("p-Laplacian step active set %s", pattern)
            return ResolventStep(x=w, z=np.clip(z, K.lower, K.upper), force=force, branch='/'.join(pattern))
    return None


def _coupled_alternation(plant: PLaplacianPlant, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                         r: np.ndarray, K: ConvexSet, tol: float, max_iter: int) -> ResolventStep:
    """Alternate the field solve with z frozen and the projected z update until z settles."""
    x_prev = np.asarray(x_prev, dtype=float)
    z_prev = as_vector(z_prev)
    r = as_vector(r)
    z = z_prev.copy()
    w = x_prev
    change = np.inf
    for iteration in range(1, max_iter + 1):
        w = plant.state_resolvent(h, x_prev, z, tol, max_iter)
        z_next = K.project(z_prev + h * (r - pde_output(plant.params, w)))
        change = float(np.linalg.norm(z_next - z))
        z = z_next
        if change <= max(tol, STEADY_NEWTON_TOL) * (1.0 + float(np.linalg.norm(z))):
            w = plant.state_resolvent(h, x_prev, z, tol, max_iter)
            force = r - pde_output(plant.params, w) - (z - z_prev) / h
            return ResolventStep(x=w, z=z, force=force, branch='alternation')
    raise ConvergenceError("field/integrator alternation did not converge", max_iter, change)


def build_plaplacian(block: Dict[str, Any]) -> PLaplacianPlant:
    """Build from {"plant": "plaplacian", "p": 4, "n_grid": 200}."""
    return PLaplacianPlant(PdeParams(p=block.get('p', 4), n_grid=block.get('n_grid', 200)))
