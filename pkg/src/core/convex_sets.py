"""
Convex Sets Module
Closed convex sets with exact projections and normal-cone membership tests
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from .errors import ConvergenceError, DimensionMismatchError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DYKSTRA_MAX_ITER = 10000
DYKSTRA_TOL = 1e-12


def as_vector(values: Any) -> np.ndarray:
    """Convert a scalar or sequence to a 1-D float array."""
    return np.atleast_1d(np.asarray(values, dtype=float)).reshape(-1)


class ConvexSet(ABC):
    """Nonempty closed convex subset of R^n."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Dimension of the ambient space."""

    @abstractmethod
    def _project(self, point: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """
        Draw points that lie in the set.

        Args:
            rng: Seeded numpy generator
            n: Number of points

        Returns:
            Array of shape (n, dim)
        """

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        """Tagged representation used by the scenario files."""

    def _check(self, point: Any) -> np.ndarray:
        vec = as_vector(point)
        if vec.shape[0] != self.dim:
            raise DimensionMismatchError(self.dim, vec.shape[0], "point")
        return vec

    def project(self, point: Any) -> np.ndarray:
        """
        Euclidean projection onto the set.

        The result is the unique minimizer of ||point - v|| over the set, i.e.
        the resolvent of the normal cone operator.

        Args:
            point: Point to project

        Returns:
            Projected point

        Raises:
            DimensionMismatchError: If the point has the wrong dimension
            ConvergenceError: If an intersection projection does not converge
        """
        return self._project(self._check(point))

    def distance(self, point: Any) -> float:
        vec = self._check(point)
        return float(np.linalg.norm(vec - self._project(vec)))

    def contains(self, point: Any, tol: float = DEFAULT_TOL) -> bool:
        """True iff dist(point, set) <= tol."""
        return self.distance(point) <= tol

    def normal_cone_contains(self, z: Any, w: Any, tol: float = DEFAULT_TOL) -> bool:
        """
        Test w in N_K(z) through the characterization z = P_K(z + w).

        Args:
            z: Point of the set
            w: Candidate normal vector
            tol: Tolerance on both the membership of z and the fixed-point test

        Returns:
            True if w belongs to the normal cone at z

        Raises:
            ValueError: If z lies outside the set (the normal cone is empty there)
        """
        z_vec = self._check(z)
        w_vec = self._check(w)
        if not self.contains(z_vec, tol):
            raise ValueError(f"normal cone is empty at a point outside the set: {z_vec.tolist()}")
        return bool(np.linalg.norm(self._project(z_vec + w_vec) - z_vec) <= tol)


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    """Axis-aligned box {v : lower <= v <= upper}."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = as_vector(self.lower)
        upper = as_vector(self.upper)
        if lower.shape != upper.shape:
            raise ValueError("box bounds must have the same dimension")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lower >= upper):
            raise ValueError("box needs lower < upper in every component (nonempty interior)")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def _project(self, point: np.ndarray) -> np.ndarray:
        return np.clip(point, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        lo = np.where(np.isfinite(self.lower), self.lower, np.minimum(self.upper, 0.0) - 10.0)
        hi = np.where(np.isfinite(self.upper), self.upper, np.maximum(self.lower, 0.0) + 10.0)
        return rng.uniform(lo, hi, size=(n, self.dim))

    def to_dict(self) -> Dict[str, Any]:
        return {'type': 'box', 'lower': self.lower.tolist(), 'upper': self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Ball(ConvexSet):
    """Closed Euclidean ball."""
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'center', as_vector(self.center))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, 'radius', float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def _project(self, point: np.ndarray) -> np.ndarray:
        offset = point - self.center
        norm = np.linalg.norm(offset)
        if norm <= self.radius:
            return point.copy()
        return self.center + offset * (self.radius / norm)

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        directions = rng.standard_normal((n, self.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.center + radii * directions

    def to_dict(self) -> Dict[str, Any]:
        return {'type': 'ball', 'center': self.center.tolist(), 'radius': self.radius}


@dataclass(frozen=True, eq=False)
class Halfspace(ConvexSet):
    """Halfspace {v : <normal, v> <= offset}; the normal is stored with unit length."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = as_vector(self.normal)
        length = np.linalg.norm(normal)
        if length == 0:
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, 'normal', normal / length)
        object.__setattr__(self, 'offset', float(self.offset) / length)

    @property
    def dim(self) -> int:
        return self.normal.shape[0]

    def _project(self, point: np.ndarray) -> np.ndarray:
        excess = float(self.normal @ point) - self.offset
        if excess <= 0:
            return point.copy()
        return point - excess * self.normal

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        points = rng.standard_normal((n, self.dim)) * 3.0 + self.offset * self.normal
        excess = points @ self.normal - self.offset
        # reflect the outside points across the boundary
        points -= 2.0 * np.maximum(excess, 0.0)[:, None] * self.normal
        return points

    def to_dict(self) -> Dict[str, Any]:
        return {'type': 'halfspace', 'normal': self.normal.tolist(), 'offset': self.offset}


@dataclass(frozen=True, eq=False)
class Intersection(ConvexSet):
    """Intersection of convex sets, projected with Dykstra's alternating projections."""
    sets: Tuple[ConvexSet, ...]
    max_iter: int = DYKSTRA_MAX_ITER
    tol: float = DYKSTRA_TOL

    def __post_init__(self):
        sets = tuple(self.sets)
        if not sets:
            raise ValueError("intersection needs at least one set")
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise ValueError(f"intersected sets have different dimensions: {sorted(dims)}")
        object.__setattr__(self, 'sets', sets)

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    def _project(self, point: np.ndarray) -> np.ndarray:
        x = point.copy()
        increments = [np.zeros_like(x) for _ in self.sets]
        for iteration in range(1, self.max_iter + 1):
            x_cycle = x
            change = 0.0
            for i, component in enumerate(self.sets):
                shifted = x + increments[i]
                y = component._project(shifted)
                new_increment = shifted - y
                change += float(np.sum((new_increment - increments[i]) ** 2))
                increments[i] = new_increment
                x = y
            change += float(np.sum((x - x_cycle) ** 2))
            if np.sqrt(change) <= self.tol:
                logger.debug("Dykstra converged in %d iterations", iteration)
                return x
        raise ConvergenceError("Dykstra projection did not converge", self.max_iter, float(np.sqrt(change)))

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return np.array([self._project(p) for p in self.sets[0].sample(rng, n)])

    def to_dict(self) -> Dict[str, Any]:
        return {'type': 'intersection', 'sets': [s.to_dict() for s in self.sets]}


def convex_set_from_dict(block: Dict[str, Any], path: str = "K") -> ConvexSet:
    """
    Build a set from its tagged representation.

    Args:
        block: e.g. {"type": "box", "lower": [0.25], "upper": [3.0]}
        path: Field path used in error messages

    Returns:
        The convex set

    Raises:
        ValueError: If the tag is unknown or the parameters are invalid
    """
    if not isinstance(block, dict) or 'type' not in block:
        raise ValueError(f"{path}: expected an object with a 'type' field")
    kind = str(block['type']).lower()
    try:
        if kind == 'box':
            return Box(block['lower'], block['upper'])
        if kind == 'ball':
            return Ball(block['center'], block['radius'])
        if kind == 'halfspace':
            return Halfspace(block['normal'], block['offset'])
        if kind == 'intersection':
            children = [convex_set_from_dict(b, f"{path}.sets[{i}]") for i, b in enumerate(block['sets'])]
            return Intersection(tuple(children))
    except KeyError as e:
        raise ValueError(f"{path}: missing field {e}")
    except ValueError as e:
        if str(e).startswith(path):
            raise
        raise ValueError(f"{path}: {e}")
    raise ValueError(f"{path}: unknown set type '{kind}'")


def convex_set_to_dict(convex_set: ConvexSet) -> Dict[str, Any]:
    return convex_set.to_dict()
