"""
Verification Harness Module
Numerical certificates for the closed-loop properties: contraction, energy balance,
constraint invariance, monotone steady states, convergence and uniqueness of equilibria
"""
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .convex_sets import ConvexSet
from .inclusion import (Plant, SteadyStatePair, power_balance_dissipation, feasible_input,
                        probe_dissipativity, product_distance, sample_steady_pairs,
                        steady_io, steady_state)
from .integrator import ClosedLoopConfig, Scheme, Trajectory, simulate

logger = logging.getLogger(__name__)

CONTRACTION_SLACK = 1e-8
ABSOLUTE_SLACK = 1e-11
ENERGY_TOL = 1e-9
RATIO_BAND = (1.5, 3.0)
CONSTRAINT_TOL = 1e-12
RESOLVENT_TOL = 1e-9
H_CONSISTENCY_TOL = 1e-9
SPEED_ABS_SLACK = 1e-9

STATEMENTS = {
    'constraints': "the integrator state stays in K for all t >= 0",
    'contraction': "closed-loop solutions form a semigroup of contractions in the product metric",
    'convergence': "the output tracks r and the closed loop converges to the steady-state pair",
    'dissipativity': "the plant is incrementally impedance passive with internal dissipation h >= 0",
    'energy_inequality': "closed-loop incremental energy inequality d/dt (d^2/2) + h <= 0",
    'equilibrium_uniqueness': "the closed loop possesses at most one equilibrium",
    'h_consistency': "closed-form h equals supplied incremental power minus incremental energy growth",
    'minimal_norm_decay': "the norm of the closed-loop velocity is nonincreasing along solutions",
    'monotone_io': "the steady-state input-output map is strictly monotone",
    'resolvent_nonexpansive': "the resolvent of the closed-loop generator is nonexpansive",
}


@dataclass
class CheckRecord:
    """
    Outcome of one check.

    worst_margin is the smallest remaining slack over all samples, so a
    nonnegative value means the inequality held everywhere (monotone_io needs
    it strictly positive).
    """
    name: str
    plant: str
    statement: str
    samples: int
    worst_margin: float
    tolerance: float
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


@dataclass
class VerificationReport:
    records: List[CheckRecord] = field(default_factory=list)

    def add(self, record: CheckRecord):
        self.records.append(record)
        self.records.sort(key=lambda rec: (rec.name, rec.plant))

    @property
    def passed(self) -> bool:
        return all(rec.passed for rec in self.records)

    def failed(self) -> List[CheckRecord]:
        return [rec for rec in self.records if not rec.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {'passed': self.passed, 'records': [rec.to_dict() for rec in self.records]}


def _plain(value: Any) -> Any:
    """Make numpy scalars and arrays JSON serializable."""
    if isinstance(value, dict):
        return {key: _plain(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _record(name: str, plant: Plant, samples: int, worst_margin: float, tolerance: float,
            passed: bool, **details) -> CheckRecord:
    rec = CheckRecord(name, plant.name, STATEMENTS[name], samples, float(worst_margin),
                      float(tolerance), bool(passed), details)
    level = logging.INFO if passed else logging.WARNING
    logger.log(level, "%s on %s: %s (worst margin %.3e)", name, plant.name,
               'pass' if passed else 'FAIL', worst_margin)
    return rec


def random_initial_conditions(plant: Plant, K: ConvexSet, n: int,
                              rng: np.random.Generator, scale: float = 1.0) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(plant.sample_state(rng, scale), K.sample(rng, 1)[0]) for _ in range(n)]


def _distances(plant: Plant, a: Trajectory, b: Trajectory) -> np.ndarray:
    return np.array([product_distance(plant, xa, za, xb, zb)
                     for xa, za, xb, zb in zip(a.states, a.z_values, b.states, b.z_values)])


def _decrease_margin(values: np.ndarray, rel: float = CONTRACTION_SLACK,
                     absolute: float = ABSOLUTE_SLACK) -> Tuple[float, int]:
    """Smallest slack of values[k+1] <= values[k] (1 + rel) + absolute and the step where it occurs."""
    if len(values) < 2:
        return np.inf, -1
    slack = values[:-1] * (1.0 + rel) + absolute - values[1:]
    worst = int(np.argmin(slack))
    return float(slack[worst]), worst + 1


def simulate_pairs(plant: Plant, cfg: ClosedLoopConfig, n_pairs: int, seed: int,
                   progress: Optional[Callable[[int, int], None]] = None) -> List[Tuple[Trajectory, Trajectory]]:
    """Simulate n_pairs pairs of trajectories from seeded random initial conditions."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    rng = np.random.default_rng(seed)
    starts = random_initial_conditions(plant, cfg.constraint_K, 2 * n_pairs, rng)
    pairs = []
    for i in range(n_pairs):
        (xa, za), (xb, zb) = starts[2 * i], starts[2 * i + 1]
        pairs.append((simulate(plant, cfg, xa, za), simulate(plant, cfg, xb, zb)))
        if progress is not None:
            progress(i + 1, n_pairs)
    return pairs


def check_contraction(plant: Plant, cfg: ClosedLoopConfig, n_pairs: int, seed: int,
                      pairs: Optional[List[Tuple[Trajectory, Trajectory]]] = None) -> CheckRecord:
    """
    Product-metric distance between two closed-loop solutions must not grow.

    The splitting scheme is not exactly nonexpansive; its record is informational
    and always passes, with the strict outcome kept in the details.
    """
    pairs = pairs if pairs is not None else simulate_pairs(plant, cfg, n_pairs, seed)
    worst, worst_pair, worst_step = np.inf, -1, -1
    for i, (a, b) in enumerate(pairs):
        margin, step = _decrease_margin(_distances(plant, a, b))
        if margin < worst:
            worst, worst_pair, worst_step = margin, i, step
    strict = worst >= 0
    informational = cfg.scheme is Scheme.SPLITTING
    return _record('contraction', plant, len(pairs), worst, CONTRACTION_SLACK,
                   strict or informational, scheme=cfg.scheme.value, informational=informational,
                   strict_passed=strict, worst_pair=worst_pair, worst_step=worst_step)


def energy_residuals(plant: Plant, traj_a: Trajectory, traj_b: Trajectory,
                     include_constraint_work: bool = False) -> np.ndarray:
    """
    Discrete incremental energy residuals of two trajectories on the same time grid.

    residual_k = (d_{k+1}^2 - d_k^2) / (2 h) + h(point_{k+1}^a, point_{k+1}^b), where
    the points carry the realized selections. For the implicit scheme it is <= 0 up to
    rounding. With include_constraint_work the nonnegative term <dw, dz> of the
    normal-cone forces is added back, which leaves the pure O(h) time-stepping defect.
    """
    if len(traj_a) != len(traj_b):
        raise ValueError("trajectories must share the time grid")
    step = traj_a.step_h
    squared = _distances(plant, traj_a, traj_b) ** 2
    out = np.empty(len(traj_a) - 1)
    for k in range(len(out)):
        j = k + 1
        h_value = plant.dissipation_h(traj_a.states[j], traj_a.z_values[j], traj_a.selections[j],
                                      traj_b.states[j], traj_b.z_values[j], traj_b.selections[j])
        out[k] = 0.5 * (squared[j] - squared[k]) / step + h_value
        if include_constraint_work:
            dw = traj_a.z_forces[j] - traj_b.z_forces[j]
            dz = traj_a.z_values[j] - traj_b.z_values[j]
            out[k] += float(dw @ dz)
    return out


def _energy_pass(plant: Plant, cfg: ClosedLoopConfig, n_pairs: int,
                 seed: int) -> Tuple[float, float, float, float]:
    """Worst slack, largest defect, defect per unit squared velocity and the allowed scale."""
    worst_slack = np.inf
    defect = 0.0
    scale = 0.0
    total_defect = 0.0
    total_speed = 0.0
    for a, b in simulate_pairs(plant, cfg, n_pairs, seed):
        d0 = product_distance(plant, a.states[0], a.z_values[0], b.states[0], b.z_values[0])
        allowed = ENERGY_TOL * (1.0 + d0 ** 2)
        residuals = energy_residuals(plant, a, b)
        if len(residuals):
            worst_slack = min(worst_slack, float(np.min(allowed - residuals)))
            defects = np.abs(energy_residuals(plant, a, b, True))
            defect = max(defect, float(np.max(defects)))
            total_defect += float(np.sum(defects))
            total_speed += float(np.sum(_relative_speeds(plant, a, b) ** 2))
        scale = max(scale, allowed)
    per_speed = total_defect / total_speed if total_speed > 0 else 0.0
    return worst_slack, defect, per_speed, scale


def _relative_speeds(plant: Plant, a: Trajectory, b: Trajectory) -> np.ndarray:
    """Product-metric norm of the difference quotient of a - b on each step."""
    dx = a.states - b.states
    dz = a.z_values - b.z_values
    return np.array([product_distance(plant, dx[k + 1], dz[k + 1], dx[k], dz[k])
                     for k in range(len(a) - 1)]) / a.step_h


def check_energy_inequality(plant: Plant, cfg: ClosedLoopConfig, n_pairs: int, seed: int) -> CheckRecord:
    """
    Check the discrete incremental energy inequality and its first-order consistency.

    Every residual must stay below 1e-9 (1 + d_0^2). The time-stepping defect of a
    first-order step is (h/2) ||v_k||^2 for the relative velocity v_k, so the defect
    per unit squared velocity is measured at h and h/2 and their ratio must fall in
    [1.5, 3], also across unresolved stiff initial layers. When the defect is at
    rounding level the ratio is not meaningful and is skipped.
    """
    slack, defect, per_speed, scale = _energy_pass(plant, cfg, n_pairs, seed)
    half_slack, half_defect, half_per_speed, _ = _energy_pass(plant, cfg.with_step(0.5 * cfg.step_h),
                                                              n_pairs, seed)
    worst = min(slack, half_slack)
    ratio = per_speed / half_per_speed if half_per_speed > 0 else np.inf
    degenerate = defect <= scale
    ratio_ok = degenerate or RATIO_BAND[0] <= ratio <= RATIO_BAND[1]
    informational = cfg.scheme is Scheme.SPLITTING
    strict = worst >= 0 and ratio_ok
    return _record('energy_inequality', plant, n_pairs, worst, ENERGY_TOL, strict or informational,
                   scheme=cfg.scheme.value, informational=informational, strict_passed=strict,
                   ratio=ratio, ratio_band=list(RATIO_BAND), max_defect=defect,
                   max_defect_half_step=half_defect, defect_per_speed=per_speed,
                   defect_per_speed_half_step=half_per_speed)


def check_constraints(trajectory: Trajectory, K: ConvexSet, plant_name: str = '',
                      tol: float = CONSTRAINT_TOL) -> CheckRecord:
    """Every z sample lies within tol of K; an empty trajectory passes vacuously."""
    worst, index = np.inf, -1
    for k, z in enumerate(trajectory.z_values):
        slack = tol - K.distance(z)
        if slack < worst:
            worst, index = slack, k
    passed = worst >= 0
    first_violation = next((k for k, z in enumerate(trajectory.z_values) if K.distance(z) > tol), None)
    rec = CheckRecord('constraints', plant_name, STATEMENTS['constraints'], len(trajectory),
                      float(worst), tol, bool(passed),
                      {'worst_index': index, 'violation_index': first_violation})
    if not passed:
        logger.warning("constraint violated at sample %d", first_violation)
    return rec


def check_monotone_io(plant: Plant, K: ConvexSet, n_pairs: int, seed: int) -> CheckRecord:
    """
    Sampled pairs u1 != u2 in K must give <u1 - u2, y1 - y2> > 0.

    The worst margin is the smallest pairing; the smallest pairing relative to
    ||u1 - u2||^2 is kept in the details.

    Raises:
        ConvergenceError: If a steady-state solve fails
    """
    rng = np.random.default_rng(seed)
    pairings = []
    normalized = []
    for u1, u2 in sample_steady_pairs(plant, K, n_pairs, rng):
        du = u1 - u2
        value = float(du @ (steady_io(plant, u1) - steady_io(plant, u2)))
        pairings.append(value)
        normalized.append(value / float(du @ du))
    worst = min(pairings)
    return _record('monotone_io', plant, n_pairs, worst, 0.0, worst > 0,
                   normalized_margin=min(normalized))


def check_convergence(plant: Plant, cfg: ClosedLoopConfig, pair: SteadyStatePair, x0: Any, z0: Any,
                      tol: float, trajectory: Optional[Trajectory] = None) -> CheckRecord:
    """
    The final distance to the steady-state pair is at most tol and the distance
    never increases along the run.
    """
    if trajectory is None:
        trajectory = simulate(plant, cfg, x0, z0, target=pair)
    distances = trajectory.dist_to_star
    monotone_margin, step = _decrease_margin(distances)
    final = float(distances[-1])
    output_error = float(np.linalg.norm(trajectory.final_output - cfg.reference_r))
    monotone = monotone_margin >= 0
    return _record('convergence', plant, 1, tol - final, tol, final <= tol and monotone,
                   final_distance=final, output_error=output_error, monotone=monotone,
                   monotone_margin=monotone_margin, worst_step=step)


def check_equilibrium_uniqueness(plant: Plant, cfg: ClosedLoopConfig, n_starts: int, seed: int,
                                 tol: float = 1e-3,
                                 starts: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None) -> CheckRecord:
    """Random starts must converge to limits within 10 tol of each other."""
    if starts is None:
        rng = np.random.default_rng(seed)
        starts = random_initial_conditions(plant, cfg.constraint_K, n_starts, rng)
    limits = []
    for x0, z0 in starts:
        traj = simulate(plant, cfg, x0, z0)
        limits.append((traj.final_state, traj.final_z))
    spread = max((product_distance(plant, xa, za, xb, zb) for (xa, za), (xb, zb) in combinations(limits, 2)),
                 default=0.0)
    allowed = 10.0 * tol
    return _record('equilibrium_uniqueness', plant, len(starts), allowed - spread, allowed,
                   spread <= allowed, spread=spread)


def check_resolvent_nonexpansive(plant: Plant, cfg: ClosedLoopConfig, n_pairs: int, seed: int,
                                 tol: float = RESOLVENT_TOL) -> CheckRecord:
    """||J(a) - J(b)|| <= ||a - b|| + tol for the coupled implicit step J."""
    rng = np.random.default_rng(seed)
    K, h, r = cfg.constraint_K, cfg.step_h, cfg.reference_r
    worst = np.inf
    for (xa, za), (xb, zb) in zip(*[iter(random_initial_conditions(plant, K, 2 * n_pairs, rng))] * 2):
        before = product_distance(plant, xa, za, xb, zb)
        ja = plant.coupled_resolvent(h, xa, za, r, K, cfg.solver_tol, cfg.solver_max_iter)
        jb = plant.coupled_resolvent(h, xb, zb, r, K, cfg.solver_tol, cfg.solver_max_iter)
        after = product_distance(plant, ja.x, ja.z, jb.x, jb.z)
        worst = min(worst, before + tol * (1.0 + before) - after)
    return _record('resolvent_nonexpansive', plant, n_pairs, worst, tol, worst >= 0)


def check_minimal_norm_decay(plant: Plant, trajectory: Trajectory, rel: float = CONTRACTION_SLACK,
                             absolute: float = SPEED_ABS_SLACK) -> CheckRecord:
    """
    Product norm of ((x_{k+1} - x_k)/h, (z_{k+1} - z_k)/h) is nonincreasing.

    The absolute slack absorbs inner solver tolerances, which enter the speeds divided by h.
    """
    step = trajectory.step_h
    velocities = np.array([
        product_distance(plant, trajectory.states[k + 1], trajectory.z_values[k + 1],
                         trajectory.states[k], trajectory.z_values[k]) / step
        for k in range(len(trajectory) - 1)
    ])
    margin, index = _decrease_margin(velocities, rel, absolute)
    return _record('minimal_norm_decay', plant, len(velocities), margin, rel, margin >= 0,
                   worst_step=index, initial_speed=float(velocities[0]) if len(velocities) else 0.0)


def check_dissipativity(plant: Plant, samples: int = 100, seed: int = 0,
                        tolerance: float = 1e-9) -> CheckRecord:
    """Sampled incremental passivity <df, dx>_X <= <du, dg> on the graph of A."""
    report = probe_dissipativity(plant, samples, seed, tolerance)
    return _record('dissipativity', plant, samples, tolerance - report.worst_margin, tolerance,
                   report.passed, failures=report.failures)


def check_h_consistency(plant: Plant, samples: int = 100, seed: int = 0,
                        tol: float = H_CONSISTENCY_TOL) -> CheckRecord:
    """The plant's closed-form h matches <du, dg> - <df, dx>_X on sampled graph points."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(samples):
        a, b = plant.sample_point(rng), plant.sample_point(rng)
        balance = power_balance_dissipation(plant, a.x, a.u, a.f, b.x, b.u, b.f)
        closed = plant.dissipation_h(a.x, a.u, a.f, b.x, b.u, b.f)
        worst = min(worst, tol * (1.0 + abs(balance)) - abs(closed - balance))
    return _record('h_consistency', plant, samples, worst, tol, worst >= 0)


def run_suite(plant: Plant, cfg: ClosedLoopConfig, x0: Any, z0: Any,
              n_pairs: int = 20, n_starts: int = 5, seed: int = 0, tol: float = 1e-3,
              pair: Optional[SteadyStatePair] = None,
              progress: Optional[Callable[[int, int], None]] = None) -> VerificationReport:
    """
    Run every check on one plant and scenario.

    Args:
        plant: The plant
        cfg: Closed-loop configuration (its reference must be feasible)
        x0, z0: Initial condition of the convergence run
        n_pairs: Random pairs for the pairwise checks
        n_starts: Random starts for the uniqueness check
        seed: Seed shared by all sampled checks
        tol: Convergence tolerance
        pair: Steady-state pair; computed from the reference when omitted
        progress: Optional callback receiving (finished checks, total checks)

    Returns:
        VerificationReport ordered by check name

    Raises:
        InfeasibleReferenceError: If the reference is not attainable in K
    """
    K = cfg.constraint_K
    if pair is None:
        pair = steady_state(plant, feasible_input(plant, cfg.reference_r, K), K)
    trajectory = simulate(plant, cfg, x0, z0, target=pair)

    tasks: List[Callable[[], CheckRecord]] = [
        lambda: check_constraints(trajectory, K, plant.name),
        lambda: check_contraction(plant, cfg, n_pairs, seed),
        lambda: check_convergence(plant, cfg, pair, x0, z0, tol, trajectory),
        lambda: check_dissipativity(plant, seed=seed),
        lambda: check_energy_inequality(plant, cfg, n_pairs, seed),
        lambda: check_equilibrium_uniqueness(plant, cfg, n_starts, seed, tol),
        lambda: check_h_consistency(plant, seed=seed),
        lambda: check_monotone_io(plant, K, n_pairs, seed),
        lambda: check_resolvent_nonexpansive(plant, cfg, n_pairs, seed),
    ]
    if cfg.scheme is Scheme.IMPLICIT:
        tasks.append(lambda: check_minimal_norm_decay(plant, trajectory))

    report = VerificationReport()
    for i, task in enumerate(tasks, 1):
        report.add(task())
        if progress is not None:
            progress(i, len(tasks))
    return report
