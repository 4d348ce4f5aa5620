"""
Monotone Track - Command Line Interface
Runs, verifies and sweeps projected integral control scenarios from JSON configs
"""
import argparse
import json
import logging
import multiprocessing as mp
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core.errors import (ConfigError, ConvergenceError, InfeasibleReferenceError,
                         SimulationError)
from core.harness import VerificationReport, run_suite
from core.inclusion import feasible_input, steady_state
from core.integrator import simulate
from plants import build_plant
from plants.plaplacian import PLaplacianPlant
from utils.config import ScenarioConfig, load_config
from utils.trajectory_io import write_field_csv, write_json, write_rows_csv, write_trajectory_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VERIFICATION = 3
EXIT_INFEASIBLE = 4

THREADS_ENV = 'MONOTONE_TRACK_THREADS'


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, InfeasibleReferenceError):
        return EXIT_INFEASIBLE
    if isinstance(error, (ConvergenceError, SimulationError, np.linalg.LinAlgError)):
        return EXIT_SOLVER
    if isinstance(error, (ConfigError, FileNotFoundError, ValueError, TypeError)):
        return EXIT_CONFIG
    raise error


@dataclass
class RunSummary:
    """Outcome of one simulated scenario, as written to the JSON summary."""
    name: str
    exit_code: int
    final_state: List[float] = field(default_factory=list)
    final_z: List[float] = field(default_factory=list)
    final_output: List[float] = field(default_factory=list)
    dist_to_star: Optional[float] = None
    steps: int = 0
    wall_time: float = 0.0
    u_star: List[float] = field(default_factory=list)
    message: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _resolve(out_dir: Path, relative: Optional[str]) -> Optional[Path]:
    if relative is None:
        return None
    path = Path(relative)
    return path if path.is_absolute() else out_dir / path


class ProgressBar:
    """Adapter from the (step, total) progress callback to a tqdm bar."""

    def __init__(self, enabled: bool, desc: str):
        self.enabled = enabled
        self.desc = desc
        self.bar = None

    def __call__(self, step: int, total: int):
        if self.bar is None:
            self.bar = tqdm(total=total, desc=self.desc, leave=False)
        self.bar.update(step - self.bar.n)

    def callback(self) -> Optional[Callable[[int, int], None]]:
        return self if self.enabled else None

    def close(self):
        if self.bar is not None:
            self.bar.close()


def run_scenario(scenario: ScenarioConfig, out_dir: Path, progress: bool = False) -> RunSummary:
    """
    Resolve the feasible pair for the reference, simulate and write the artifacts.

    Args:
        scenario: Validated scenario
        out_dir: Directory for the CSV trajectory, the JSON summary and the field snapshot
        progress: Show a tqdm progress bar

    Returns:
        RunSummary; exit_code carries the outcome instead of an exception
    """
    start = time.perf_counter()
    bar = ProgressBar(progress, scenario.name)
    try:
        plant = build_plant(scenario.plant)
        cfg = scenario.closed_loop()
        u_star = feasible_input(plant, cfg.reference_r, cfg.constraint_K)
        pair = steady_state(plant, u_star, cfg.constraint_K)
        logger.info("%s: steady-state input %s", scenario.name, u_star.tolist())
        trajectory = simulate(plant, cfg, scenario.initial.x0, scenario.initial.z0,
                              target=pair, progress=bar.callback())
    except Exception as e:
        code = exit_code_for(e)
        logger.error("%s: %s", scenario.name, e)
        summary = RunSummary(scenario.name, code, wall_time=time.perf_counter() - start, message=str(e))
        _write_summary(summary, scenario, out_dir)
        return summary
    finally:
        bar.close()

    csv_path = _resolve(out_dir, scenario.output.csv_path)
    if csv_path is not None:
        write_trajectory_csv(trajectory, csv_path)
    field_path = _resolve(out_dir, scenario.output.field_path)
    if field_path is not None and isinstance(plant, PLaplacianPlant):
        write_field_csv(plant.params.nodes, trajectory.final_state, field_path)

    summary = RunSummary(
        name=scenario.name,
        exit_code=EXIT_OK,
        final_state=trajectory.final_state.tolist(),
        final_z=trajectory.final_z.tolist(),
        final_output=trajectory.final_output.tolist(),
        dist_to_star=float(trajectory.dist_to_star[-1]),
        steps=len(trajectory) - 1,
        wall_time=time.perf_counter() - start,
        u_star=pair.u_star.tolist(),
    )
    _write_summary(summary, scenario, out_dir)
    logger.info("%s: %d steps in %.2f s, final distance %.3e", scenario.name, summary.steps,
                summary.wall_time, summary.dist_to_star)
    return summary


def _write_summary(summary: RunSummary, scenario: ScenarioConfig, out_dir: Path):
    path = _resolve(out_dir, scenario.output.summary_path)
    if path is not None:
        write_json(summary.to_dict(), path)


def verify_scenario(scenario: ScenarioConfig, out_dir: Path,
                    progress: bool = False) -> Tuple[int, Optional[VerificationReport]]:
    """
    Run the verification suite and write its JSON report.

    Returns:
        Exit code (3 when a check fails) and the report, if one was produced
    """
    bar = ProgressBar(progress, f"{scenario.name} checks")
    block = scenario.verification
    try:
        plant = build_plant(scenario.plant)
        cfg = scenario.closed_loop()
        report = run_suite(plant, cfg, scenario.initial.x0, scenario.initial.z0,
                           n_pairs=block.n_pairs, n_starts=block.n_starts, seed=block.seed,
                           tol=block.tol, progress=bar.callback())
    except Exception as e:
        logger.error("%s: %s", scenario.name, e)
        return exit_code_for(e), None
    finally:
        bar.close()

    path = _resolve(out_dir, scenario.output.report_path)
    if path is not None:
        write_json(report.to_dict(), path)
    for record in report.failed():
        logger.warning("check %s failed on %s (worst margin %.3e)", record.name, record.plant,
                       record.worst_margin)
    return (EXIT_OK if report.passed else EXIT_VERIFICATION), report


def sweep_threads() -> int:
    value = os.environ.get(THREADS_ENV, '1')
    try:
        threads = int(value)
    except ValueError:
        logger.warning("%s=%r is not an integer; running the sweep serially", THREADS_ENV, value)
        return 1
    return max(threads, 1)


def _sweep_entry(task: Tuple[ScenarioConfig, float, str]) -> Dict[str, Any]:
    scenario, value, entry_dir = task
    summary = run_scenario(scenario.with_sweep_value(value), Path(entry_dir))
    return {
        'value': float(value),
        'exit_code': summary.exit_code,
        'final_output': json.dumps(summary.final_output),
        'u_star': json.dumps(summary.u_star),
        'dist_to_star': summary.dist_to_star if summary.dist_to_star is not None else float('nan'),
        'wall_time': summary.wall_time,
    }


def sweep(scenario: ScenarioConfig, out_dir: Path, threads: int = 1) -> List[Dict[str, Any]]:
    """
    Run every entry of the sweep block and aggregate the results in sweep.csv.

    Entries run in a process pool of the given size; rows keep the order of the
    swept values.

    Returns:
        One row per swept value, with its exit code

    Raises:
        ConfigError: If the scenario has no sweep block
    """
    if scenario.sweep is None:
        raise ConfigError(["sweep: the scenario has no sweep block"])
    parameter = scenario.sweep.parameter
    tasks = [(scenario, value, str(out_dir / f"{parameter}={value:g}")) for value in scenario.sweep.values]
    if threads == 1:
        rows = list(map(_sweep_entry, tasks))
    else:
        with mp.Pool(processes=min(threads, len(tasks))) as pool:
            rows = pool.map(_sweep_entry, tasks)
    fieldnames = ['value', 'exit_code', 'final_output', 'u_star', 'dist_to_star', 'wall_time']
    write_rows_csv(rows, fieldnames, out_dir / 'sweep.csv')
    logger.info("Wrote %d sweep rows to %s", len(rows), out_dir / 'sweep.csv')
    return rows


def _load(args: argparse.Namespace) -> ScenarioConfig:
    path = args.config_path or args.config
    if path is None:
        raise ConfigError(["<cli>: a config file is required"])
    scenario = load_config(path)
    return scenario.with_overrides(seed=args.seed, scheme=args.scheme, step=args.step,
                                   horizon=args.horizon)


def _out_dir(args: argparse.Namespace) -> Path:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def cmd_simulate(args: argparse.Namespace) -> int:
    summary = run_scenario(_load(args), _out_dir(args), args.progress)
    print(json.dumps(summary.to_dict(), indent=2))
    return summary.exit_code


def cmd_verify(args: argparse.Namespace) -> int:
    code, report = verify_scenario(_load(args), _out_dir(args), args.progress)
    if report is not None:
        for record in report.records:
            mark = '✓' if record.passed else '✗'
            print(f"{mark} {record.name:24s} {record.plant:12s} worst margin {record.worst_margin:.3e}")
    return code


def cmd_steady(args: argparse.Namespace) -> int:
    scenario = _load(args)
    plant = build_plant(scenario.plant)
    pair = steady_state(plant, args.u)
    output = plant.output(pair.x_star, pair.u_star)
    print(json.dumps({'u_star': pair.u_star.tolist(), 'x_star': pair.x_star.tolist(),
                      'y_star': output.tolist(), 'residual': pair.residual}, indent=2))
    return EXIT_OK


def cmd_feasible(args: argparse.Namespace) -> int:
    scenario = _load(args)
    plant = build_plant(scenario.plant)
    u_star = feasible_input(plant, args.r, scenario.K)
    pair = steady_state(plant, u_star, scenario.K)
    print(json.dumps({'r': list(args.r), 'u_star': u_star.tolist(), 'x_star': pair.x_star.tolist()},
                     indent=2))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    rows = sweep(_load(args), _out_dir(args), sweep_threads())
    for row in rows:
        print(f"{row['value']:>10g}  exit {row['exit_code']}  output {row['final_output']}")
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'verify': cmd_verify,
    'steady': cmd_steady,
    'feasible': cmd_feasible,
    'sweep': cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('config_path', nargs='?', help="Scenario JSON file")
    common.add_argument('--config', help="Scenario JSON file (alternative to the positional argument)")
    common.add_argument('--out-dir', default='.', help="Directory for output files")
    common.add_argument('--seed', type=int, help="Seed of the verification sampling")
    common.add_argument('--scheme', choices=['implicit', 'splitting'], help="Time-stepping scheme")
    common.add_argument('--step', type=float, help="Step size h")
    common.add_argument('--horizon', type=float, help="Horizon T")
    common.add_argument('--verbose', '-v', action='store_true', help="Debug logging")
    common.add_argument('--progress', action='store_true', help="Show progress bars")

    parser = argparse.ArgumentParser(
        prog='monotone-track',
        description="Projected integral control of monotone plants: simulate, verify, sweep")
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help="Simulate the closed loop")
    sub.add_parser('verify', parents=[common], help="Run the verification suite")
    steady = sub.add_parser('steady', parents=[common], help="Steady state for a constant input")
    steady.add_argument('--u', type=float, nargs='+', required=True, help="Constant input")
    feasible = sub.add_parser('feasible', parents=[common], help="Input in K attaining a reference")
    feasible.add_argument('--r', type=float, nargs='+', required=True, help="Reference output")
    sub.add_parser('sweep', parents=[common], help="Run the sweep block of the config")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        code = exit_code_for(e)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == '__main__':
    sys.exit(main())
