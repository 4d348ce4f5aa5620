"""
RLC Load With Ideal Diode
Three-state differential inclusion with a complementarity diode and exact implicit steps
"""
import itertools
import logging
from functools import lru_cache
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from core.convex_sets import Box, ConvexSet
from core.errors import ConvergenceError
from core.inclusion import DomainPoint, Plant, ResolventStep

logger = logging.getLogger(__name__)

BRANCH_TOL = 1e-10

# column order of the unknowns in the coupled step
V, I1, I2, DIODE, Z, W = range(6)


@dataclass(frozen=True)
class RlcParams:
    """Circuit parameters: C in farads, L1 and L2 in henries, R in ohms."""
    C: float = 1.0
    L1: float = 1.0
    L2: float = 1.0
    R: float = 2.0

    def __post_init__(self):
        for name in ('C', 'L1', 'L2', 'R'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"RLC parameter {name} must be positive, got {value}")


class RlcPlant(Plant):
    """
    RLC load with an ideal diode.

    State x = (V_C, I1, I2) with I2 >= 0, input the supply current I, output V_C.
    The diode voltage V_D is the normal-cone force f in N_{R+}(I2).
    """

    name = 'rlc'

    def __init__(self, params: RlcParams):
        self.params = params
        self.Q = np.diag([params.C, params.L1, params.L2])

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def input_dim(self) -> int:
        return 1

    def state_metric(self, a: np.ndarray, b: np.ndarray) -> float:
        """Stored-energy inner product a^T Q b with Q = diag(C, L1, L2)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        p = self.params
        return float(p.C * a[0] * b[0] + p.L1 * a[1] * b[1] + p.L2 * a[2] * b[2])

    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.array([x[0]], dtype=float)

    def linear_part(self) -> np.ndarray:
        """Matrix A_L of the single-valued part of the dynamics."""
        p = self.params
        return np.array([
            [0.0, -1.0 / p.C, 0.0],
            [1.0 / p.L1, -p.R / p.L1, -p.R / p.L1],
            [0.0, -p.R / p.L2, -p.R / p.L2],
        ])

    def input_vector(self) -> np.ndarray:
        return np.array([1.0 / self.params.C, 0.0, 0.0])

    def selection(self, x: np.ndarray, u: np.ndarray, diode_force: float) -> np.ndarray:
        """Element of A(x, u) for a given diode voltage f in N_{R+}(I2)."""
        p = self.params
        v_c, i1, i2 = x
        current = float(np.asarray(u).reshape(-1)[0])
        return np.array([
            (current - i1) / p.C,
            (v_c - p.R * (i1 + i2)) / p.L1,
            (-p.R * (i1 + i2) - diode_force) / p.L2,
        ])

    def diode_force_from_selection(self, x: np.ndarray, f: np.ndarray) -> float:
        """Recover the diode voltage from the third component of a selection."""
        p = self.params
        return float(-p.R * (x[1] + x[2]) - p.L2 * f[2])

    def principal_section(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """
        Minimal-Q-norm selection of A(x, u).

        With I2 > 0 the diode force is 0; with I2 = 0 it is the f <= 0 closest
        to -R(I1 + I2), which leaves the third component as small as possible.
        """
        pull = -self.params.R * (x[1] + x[2])
        force = 0.0 if x[2] > 0 else min(pull, 0.0)
        return self.selection(x, u, force)

    def steady_state(self, u_star: np.ndarray) -> np.ndarray:
        """
        Equilibrium for a constant supply current.

        I2 = (1 + N_{R+}/R)^{-1}(-u) = max(0, -u), I1 = u, V_C = R (I1 + I2);
        for u > 0 this is (R u, u, 0).
        """
        u = float(np.asarray(u_star).reshape(-1)[0])
        i2 = max(0.0, -u)
        return np.array([self.params.R * (u + i2), u, i2])

    def dissipation_h(self, x1, u1, f1, x2, u2, f2) -> float:
        """R (dI1 + dI2)^2 + (df)(dI2) with the diode forces recovered from the selections."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        force1 = self.diode_force_from_selection(x1, np.asarray(f1, dtype=float))
        force2 = self.diode_force_from_selection(x2, np.asarray(f2, dtype=float))
        return rlc_h(self.params, x1, force1, x2, force2)

    def sample_point(self, rng: np.random.Generator) -> DomainPoint:
        v_c, i1 = rng.normal(scale=2.0, size=2)
        conducting = rng.uniform() < 0.5
        i2 = abs(rng.normal(scale=2.0)) if conducting else 0.0
        force = 0.0 if conducting else -abs(rng.normal(scale=2.0))
        x = np.array([v_c, i1, i2])
        u = np.array([rng.normal(scale=2.0)])
        return DomainPoint(x, u, self.selection(x, u, force))

    def sample_state(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        v_c, i1 = rng.normal(scale=scale, size=2)
        return np.array([v_c, i1, abs(rng.normal(scale=scale))])

    def state_resolvent(self, h: float, x_prev: np.ndarray, u: np.ndarray,
                        tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Implicit step with the supply current held at u; enumerates the two diode branches."""
        p = self.params
        current = float(np.asarray(u).reshape(-1)[0])
        v_p, i1_p, i2_p = x_prev
        # unknowns (V, I1, I2 or f)
        base = np.array([
            [p.C / h, 1.0, 0.0, 0.0],
            [-1.0, p.L1 / h + p.R, p.R, 0.0],
            [0.0, p.R, p.L2 / h + p.R, 1.0],
        ])
        rhs = np.array([p.C / h * v_p + current, p.L1 / h * i1_p, p.L2 / h * i2_p])
        order = ('on', 'off') if i2_p > 0 else ('off', 'on')
        for diode in order:
            columns = [0, 1, 2] if diode == 'on' else [0, 1, 3]
            v_c, i1, unknown = np.linalg.solve(base[:, columns], rhs)
            scale = 1.0 + abs(unknown)
            if diode == 'on' and unknown >= -BRANCH_TOL * scale:
                return np.array([v_c, i1, _clamp_current(unknown)])
            if diode == 'off' and unknown <= BRANCH_TOL * scale:
                return np.array([v_c, i1, 0.0])
        raise ConvergenceError("no diode branch satisfies its sign condition", 2)

    def coupled_resolvent(self, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                          r: np.ndarray, K: ConvexSet,
                          tol: float = 1e-12, max_iter: int = 100) -> ResolventStep:
        return rlc_coupled_resolvent(self.params, h, x_prev, z_prev, r, K)

    def describe(self) -> Dict[str, Any]:
        info = super().describe()
        info.update({'C': self.params.C, 'L1': self.params.L1, 'L2': self.params.L2, 'R': self.params.R})
        return info


def _clamp_current(i2: float) -> float:
    return 0.0 if i2 < 0 else i2


def rlc_h(params: RlcParams, x1: np.ndarray, force1: float, x2: np.ndarray, force2: float) -> float:
    """
    Internal dissipation R (I1 + I2 - I1' - I2')^2 + (f - f')(I2 - I2').

    Args:
        params: Circuit parameters
        x1, x2: States
        force1, force2: Diode voltages, elements of N_{R+}(I2) and N_{R+}(I2')

    Returns:
        Nonnegative dissipation (up to rounding)
    """
    d_total = (x1[1] + x1[2]) - (x2[1] + x2[2])
    return float(params.R * d_total ** 2 + (force1 - force2) * (x1[2] - x2[2]))


def _interval(K: ConvexSet) -> Tuple[float, float]:
    if not isinstance(K, Box) or K.dim != 1:
        raise TypeError("the RLC closed loop needs K to be an interval (a 1-D box)")
    return float(K.lower[0]), float(K.upper[0])


CONDUCTING_FIRST = tuple(itertools.product(('on', 'off'), ('free', 'lower', 'upper')))
BLOCKING_FIRST = tuple(itertools.product(('off', 'on'), ('free', 'lower', 'upper')))


def _branch_order(x_prev: np.ndarray) -> Tuple[Tuple[str, str], ...]:
    return CONDUCTING_FIRST if x_prev[2] > 0 else BLOCKING_FIRST


@lru_cache(maxsize=64)
def _coupled_matrix(params: RlcParams, h: float) -> np.ndarray:
    """Rows: capacitor, inductor L1, inductor L2 with diode, projected integrator."""
    C, L1, L2, R = params.C, params.L1, params.L2, params.R
    full = np.zeros((4, 6))
    full[0, [V, I1, Z]] = [C / h, 1.0, -1.0]
    full[1, [V, I1, I2]] = [-1.0, L1 / h + R, R]
    full[2, [I1, I2, DIODE]] = [R, L2 / h + R, 1.0]
    full[3, [V, Z, W]] = [1.0, 1.0 / h, 1.0]
    full.setflags(write=False)
    return full


@lru_cache(maxsize=256)
def _branch_system(params: RlcParams, h: float, diode: str,
                   free: bool) -> Tuple[Tuple[int, ...], Tuple[int, ...], np.ndarray, np.ndarray]:
    """Known and unknown columns of a branch, the known block and the inverse of the unknown block."""
    known = (DIODE if diode == 'on' else I2, W if free else Z)
    unknown = tuple(c for c in range(6) if c not in known)
    full = _coupled_matrix(params, h)
    known_block = full[:, list(known)]
    inverse = np.linalg.inv(full[:, list(unknown)])
    known_block.setflags(write=False)
    inverse.setflags(write=False)
    return known, unknown, known_block, inverse


def rlc_coupled_resolvent(params: RlcParams, h: float, x_prev: np.ndarray, z_prev: np.ndarray,
                          r: np.ndarray, K: ConvexSet) -> ResolventStep:
    """
    Exact implicit step of the RLC closed loop by branch enumeration.

    Each of the six branches (diode conducting or blocking) x (integrator free,
    at the lower bound, at the upper bound) is a 4x4 linear system; the unique
    branch whose sign conditions hold is returned. The four distinct branch
    matrices are factored once per (params, h).

    Args:
        params: Circuit parameters
        h: Step size
        x_prev: Previous state (V_C, I1, I2) with I2 >= 0
        z_prev: Previous supply current, in K
        r: Reference voltage
        K: Interval [I_min, I_max]

    Returns:
        ResolventStep with the normal-cone force of the integrator

    Raises:
        ConvergenceError: If no branch satisfies its sign conditions
    """
    lo, hi = _interval(K)
    h = float(h)
    v_p, i1_p, i2_p = (float(v) for v in x_prev)
    z_p = float(np.asarray(z_prev).reshape(-1)[0])
    ref = float(np.asarray(r).reshape(-1)[0])
    rhs = np.array([params.C / h * v_p, params.L1 / h * i1_p, params.L2 / h * i2_p, z_p / h + ref])

    for diode, integrator in _branch_order(x_prev):
        free = integrator == 'free'
        known, unknown, known_block, inverse = _branch_system(params, h, diode, free)
        fixed = np.array([0.0, 0.0 if free else (lo if integrator == 'lower' else hi)])
        values = np.zeros(6)
        values[list(known)] = fixed
        values[list(unknown)] = inverse @ (rhs - known_block @ fixed)

        scale = 1.0 + np.max(np.abs(values))
        slack = BRANCH_TOL * scale
        if diode == 'on' and values[I2] < -slack:
            continue
        if diode == 'off' and values[DIODE] > slack:
            continue
        if free and not (lo - slack <= values[Z] <= hi + slack):
            continue
        if integrator == 'lower' and values[W] > slack:
            continue
        if integrator == 'upper' and values[W] < -slack:
            continue

        logger.debug("RLC step branch diode=%s integrator=%s", diode, integrator)
        # a conducting solve may leave I2 a few ulps below zero
        i2 = 0.0 if diode == 'off' else _clamp_current(values[I2])
        x = np.array([values[V], values[I1], i2])
        z = np.array([min(max(values[Z], lo), hi)])
        return ResolventStep(x=x, z=z, force=np.array([values[W]]), branch=f"{diode}/{integrator}")
    raise ConvergenceError("no RLC branch satisfies its sign conditions", 6)


def rlc_metric(params: RlcParams, a: np.ndarray, b: np.ndarray) -> float:
    """a^T Q b with Q = diag(C, L1, L2)."""
    return RlcPlant(params).state_metric(a, b)


def rlc_steady_state(params: RlcParams, u_star: float) -> np.ndarray:
    return RlcPlant(params).steady_state(np.array([u_star]))


def rlc_principal_section(params: RlcParams, state: np.ndarray, z: float) -> np.ndarray:
    return RlcPlant(params).principal_section(np.asarray(state, dtype=float), np.array([z]))


def build_rlc(block: Dict[str, Any]) -> RlcPlant:
    """Build from a config block {"plant": "rlc", "C": ..., "L1": ..., "L2": ..., "R": ...}."""
    defaults = RlcParams()
    params = RlcParams(
        C=float(block.get('C', defaults.C)),
        L1=float(block.get('L1', defaults.L1)),
        L2=float(block.get('L2', defaults.L2)),
        R=float(block.get('R', defaults.R)),
    )
    return RlcPlant(params)
