"""
Scenario Configuration
Loads JSON scenario files into validated frozen dataclasses
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from core.convex_sets import ConvexSet, as_vector, convex_set_from_dict
from core.errors import ConfigError
from core.integrator import ClosedLoopConfig, Scheme

logger = logging.getLogger(__name__)

Z0_TOL = 1e-9
KNOWN_BLOCKS = ('name', 'plant', 'controller', 'integrator', 'initial', 'output', 'sweep', 'verification')


@dataclass(frozen=True)
class IntegratorBlock:
    scheme: Scheme = Scheme.IMPLICIT
    h: float = 1e-3
    T: float = 10.0
    solver_tol: float = 1e-12
    solver_max_iter: int = 100


@dataclass(frozen=True, eq=False)
class InitialBlock:
    """x0 is a vector, or a number meaning a constant field for the p-Laplacian plant."""
    x0: Union[float, np.ndarray]
    z0: np.ndarray


@dataclass(frozen=True)
class OutputBlock:
    csv_path: Optional[str] = 'trajectory.csv'
    report_path: Optional[str] = 'report.json'
    summary_path: Optional[str] = 'summary.json'
    field_path: Optional[str] = None


@dataclass(frozen=True)
class SweepBlock:
    """Scenario parameter to vary: "r" or a key of the plant block."""
    parameter: str
    values: Tuple[float, ...]


@dataclass(frozen=True)
class VerificationBlock:
    n_pairs: int = 20
    n_starts: int = 5
    seed: int = 0
    tol: float = 1e-3


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """A complete closed-loop scenario."""
    name: str
    plant: Dict[str, Any]
    reference: np.ndarray
    K: ConvexSet
    integrator: IntegratorBlock
    initial: InitialBlock
    output: OutputBlock = field(default_factory=OutputBlock)
    sweep: Optional[SweepBlock] = None
    verification: VerificationBlock = field(default_factory=VerificationBlock)

    def closed_loop(self) -> ClosedLoopConfig:
        block = self.integrator
        return ClosedLoopConfig(self.reference, self.K, block.h, block.T, block.scheme,
                                block.solver_tol, block.solver_max_iter)

    def with_overrides(self, seed: Optional[int] = None, scheme: Optional[str] = None,
                       step: Optional[float] = None, horizon: Optional[float] = None) -> 'ScenarioConfig':
        """
        Apply command-line overrides.

        Raises:
            ConfigError: If an overridden value is invalid
        """
        errors = []
        integrator = self.integrator
        if scheme is not None:
            try:
                integrator = replace(integrator, scheme=Scheme(scheme.lower()))
            except ValueError:
                errors.append(f"--scheme: unknown scheme '{scheme}'")
        if step is not None:
            if step <= 0:
                errors.append("--step: must be positive")
            integrator = replace(integrator, h=float(step))
        if horizon is not None:
            if horizon <= 0:
                errors.append("--horizon: must be positive")
            integrator = replace(integrator, T=float(horizon))
        if integrator.T < integrator.h:
            errors.append("integrator.T: must be at least integrator.h")
        if errors:
            raise ConfigError(errors)
        verification = self.verification if seed is None else replace(self.verification, seed=int(seed))
        return replace(self, integrator=integrator, verification=verification)

    def with_reference(self, r: Any) -> 'ScenarioConfig':
        reference = np.broadcast_to(as_vector(r), self.reference.shape).copy()
        return replace(self, reference=reference)

    def with_sweep_value(self, value: float) -> 'ScenarioConfig':
        """Scenario with the swept parameter set to value."""
        if self.sweep is None:
            raise ConfigError(["sweep: the scenario has no sweep block"])
        if self.sweep.parameter == 'r':
            return self.with_reference(value)
        plant = dict(self.plant)
        plant[self.sweep.parameter] = value
        return replace(self, plant=plant)


def _number(value: Any, path: str, errors: List[str], positive: bool = False) -> Optional[float]:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{path}: expected a number")
        return None
    if not np.isfinite(value):
        errors.append(f"{path}: must be finite")
        return None
    if positive and value <= 0:
        errors.append(f"{path}: must be positive")
        return None
    return float(value)


def _vector(value: Any, path: str, errors: List[str]) -> Optional[np.ndarray]:
    try:
        vec = as_vector(value)
    except (TypeError, ValueError):
        errors.append(f"{path}: expected a number or a list of numbers")
        return None
    if vec.size == 0 or not np.all(np.isfinite(vec)):
        errors.append(f"{path}: expected finite numbers")
        return None
    return vec


def _block(data: Dict[str, Any], key: str, errors: List[str], required: bool = True) -> Dict[str, Any]:
    value = data.get(key)
    if value is None:
        if required:
            errors.append(f"{key}: missing block")
        return {}
    if not isinstance(value, dict):
        errors.append(f"{key}: expected an object")
        return {}
    return value


def _integrator(block: Dict[str, Any], errors: List[str]) -> IntegratorBlock:
    defaults = IntegratorBlock()
    scheme = defaults.scheme
    if 'scheme' in block:
        try:
            scheme = Scheme(str(block['scheme']).lower())
        except ValueError:
            errors.append(f"integrator.scheme: unknown scheme '{block['scheme']}'")
    h = _number(block.get('h', defaults.h), 'integrator.h', errors, positive=True)
    T = _number(block.get('T', defaults.T), 'integrator.T', errors, positive=True)
    tol = _number(block.get('solver_tol', defaults.solver_tol), 'integrator.solver_tol', errors, positive=True)
    max_iter = block.get('solver_max_iter', defaults.solver_max_iter)
    if not isinstance(max_iter, int) or isinstance(max_iter, bool) or max_iter < 1:
        errors.append("integrator.solver_max_iter: expected a positive integer")
        max_iter = defaults.solver_max_iter
    if h is not None and T is not None and T < h:
        errors.append("integrator.T: must be at least integrator.h")
    return IntegratorBlock(scheme, h or defaults.h, T or defaults.T, tol or defaults.solver_tol, max_iter)


def _output(block: Dict[str, Any], errors: List[str]) -> OutputBlock:
    values = {}
    for key in ('csv_path', 'report_path', 'summary_path', 'field_path'):
        if key in block:
            value = block[key]
            if value is not None and not isinstance(value, str):
                errors.append(f"output.{key}: expected a string or null")
                continue
            values[key] = value
    return OutputBlock(**values)


def _sweep(block: Dict[str, Any], errors: List[str]) -> Optional[SweepBlock]:
    if not block:
        return None
    parameter = block.get('parameter')
    if not isinstance(parameter, str):
        errors.append("sweep.parameter: expected a string")
        return None
    values = block.get('values')
    if not isinstance(values, list) or not values:
        errors.append("sweep.values: expected a nonempty list")
        return None
    numbers = [_number(v, f"sweep.values[{i}]", errors) for i, v in enumerate(values)]
    if any(v is None for v in numbers):
        return None
    return SweepBlock(parameter, tuple(numbers))


def _verification(block: Dict[str, Any], errors: List[str]) -> VerificationBlock:
    defaults = VerificationBlock()
    values = {}
    for key in ('n_pairs', 'n_starts', 'seed'):
        value = block.get(key, getattr(defaults, key))
        if not isinstance(value, int) or isinstance(value, bool) or value < (0 if key == 'seed' else 1):
            errors.append(f"verification.{key}: expected a {'nonnegative' if key == 'seed' else 'positive'} integer")
            value = getattr(defaults, key)
        values[key] = value
    tol = _number(block.get('tol', defaults.tol), 'verification.tol', errors, positive=True)
    return VerificationBlock(tol=tol or defaults.tol, **values)


def parse_config(data: Any, name: str = 'scenario') -> ScenarioConfig:
    """
    Validate a decoded scenario and build its dataclasses.

    Every problem is collected with its field path before raising.

    Args:
        data: Decoded JSON object
        name: Fallback scenario name

    Returns:
        ScenarioConfig

    Raises:
        ConfigError: With the list of all schema errors
    """
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected an object"])
    errors: List[str] = []
    for key in data:
        if key not in KNOWN_BLOCKS:
            logger.warning("ignoring unknown config block '%s'", key)

    plant = _block(data, 'plant', errors)
    if plant and not isinstance(plant.get('plant'), str):
        errors.append("plant.plant: expected the plant tag (rlc, linear_node, plaplacian)")

    controller = _block(data, 'controller', errors)
    reference = _vector(controller.get('r'), 'controller.r', errors) if controller else None
    K = None
    if controller:
        if 'K' not in controller:
            errors.append("controller.K: missing")
        else:
            try:
                K = convex_set_from_dict(controller['K'], 'controller.K')
            except ValueError as e:
                errors.append(str(e))
    if reference is not None and K is not None and reference.shape[0] not in (1, K.dim):
        errors.append(f"controller.r: expected {K.dim} values, got {reference.shape[0]}")
    if reference is not None and K is not None and reference.shape[0] == 1:
        reference = np.full(K.dim, reference[0])

    integrator = _integrator(_block(data, 'integrator', errors, required=False), errors)

    initial = _block(data, 'initial', errors)
    x0 = z0 = None
    if initial:
        if isinstance(initial.get('x0'), (int, float)) and not isinstance(initial.get('x0'), bool):
            x0 = float(initial['x0'])
        else:
            x0 = _vector(initial.get('x0'), 'initial.x0', errors)
        z0 = _vector(initial.get('z0'), 'initial.z0', errors)
        if z0 is not None and K is not None and z0.shape[0] != K.dim:
            errors.append(f"initial.z0: expected {K.dim} values, got {z0.shape[0]}")
        elif z0 is not None and K is not None and K.distance(z0) > Z0_TOL:
            errors.append(f"initial.z0: {z0.tolist()} lies outside K; the projected integrator "
                          "keeps z(t) in K for all t >= 0, so it must start there")

    output = _output(_block(data, 'output', errors, required=False), errors)
    sweep = _sweep(_block(data, 'sweep', errors, required=False), errors)
    verification = _verification(_block(data, 'verification', errors, required=False), errors)

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        name=str(data.get('name', name)),
        plant=dict(plant),
        reference=reference,
        K=K,
        integrator=integrator,
        initial=InitialBlock(x0, z0),
        output=output,
        sweep=sweep,
        verification=verification,
    )


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    """
    Load and validate a scenario file.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If the file is not valid JSON or fails validation
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError([f"<root>: invalid JSON ({e})"])
    return parse_config(data, name=path.stem)
