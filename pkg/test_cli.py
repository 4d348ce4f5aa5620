#!/usr/bin/env python3
"""
Tests for scenario configs, trajectory files and the command line
"""
import csv
import json
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

import numpy as np
import pytest

from cli.main import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_SOLVER, EXIT_VERIFICATION,
                      THREADS_ENV, exit_code_for, main, run_scenario, sweep_threads)
from core.convex_sets import Box
from core.errors import ConfigError, ConvergenceError, InfeasibleReferenceError
from core.integrator import ClosedLoopConfig, Scheme, simulate
from plants import build_plant
from plants.rlc import RlcParams, RlcPlant
from utils.config import load_config, parse_config
from utils.trajectory_io import read_trajectory_csv, write_trajectory_csv

CONFIGS = Path(__file__).parent / "configs"
SHORT = ['--horizon', '1', '--step', '0.01']


def rlc_data(**overrides):
    data = {
        'name': 'rlc_test',
        'plant': {'plant': 'rlc', 'C': 1.0, 'L1': 1.0, 'L2': 1.0, 'R': 2.0},
        'controller': {'r': [2.0], 'K': {'type': 'box', 'lower': [0.25], 'upper': [3.0]}},
        'integrator': {'scheme': 'implicit', 'h': 0.01, 'T': 1.0},
        'initial': {'x0': [0.0, 0.0, 0.0], 'z0': [0.5]},
    }
    data.update(overrides)
    return data


def write_config(tmp_path, data):
    path = tmp_path / 'scenario.json'
    path.write_text(json.dumps(data), encoding='utf-8')
    return str(path)


@pytest.mark.parametrize("name", ['rlc_demo', 'rlc_sweep', 'node_demo', 'plaplacian_demo'])
def test_shipped_configs_parse(name):
    scenario = load_config(CONFIGS / f"{name}.json")
    assert scenario.name == name
    plant = build_plant(scenario.plant)
    assert scenario.K.dim == plant.input_dim == scenario.reference.shape[0]


def test_scalar_reference_is_broadcast():
    data = rlc_data(controller={'r': 1.0, 'K': {'type': 'box', 'lower': [-2, -2], 'upper': [2, 2]}},
                    initial={'x0': 0.0, 'z0': [0.0, 0.0]})
    assert parse_config(data).reference == pytest.approx([1.0, 1.0])


def test_all_errors_are_collected():
    data = rlc_data(controller={'r': [2.0], 'K': {'type': 'box', 'lower': [2.0], 'upper': [1.0]}},
                    integrator={'h': -1.0, 'solver_tol': 0.0})
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    errors = info.value.errors
    assert any(e.startswith('controller.K') for e in errors)
    assert any(e.startswith('integrator.h') for e in errors)
    assert any(e.startswith('integrator.solver_tol') for e in errors)


def test_z0_outside_K_is_a_config_error():
    with pytest.raises(ConfigError, match="initial.z0"):
        parse_config(rlc_data(initial={'x0': [0.0, 0.0, 0.0], 'z0': [5.0]}))


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / 'absent.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"plant": ', encoding='utf-8')
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def test_overrides():
    scenario = parse_config(rlc_data()).with_overrides(seed=9, scheme='splitting', step=0.02, horizon=2.0)
    cfg = scenario.closed_loop()
    assert cfg.scheme is Scheme.SPLITTING
    assert cfg.n_steps == 100
    assert scenario.verification.seed == 9
    with pytest.raises(ConfigError):
        parse_config(rlc_data()).with_overrides(step=-1.0)


def test_trajectory_csv_round_trip(tmp_path):
    plant = RlcPlant(RlcParams())
    cfg = ClosedLoopConfig([2.0], Box([0.25], [3.0]), 0.01, 0.5)
    traj = simulate(plant, cfg, np.zeros(3), [0.5])
    path = write_trajectory_csv(traj, tmp_path / 'out' / 'trajectory.csv')
    columns = read_trajectory_csv(path)
    assert list(columns) == ['t', 'x_0', 'x_1', 'x_2', 'z_0', 'y_0', 'h_value', 'dist_to_star']
    # 17 significant digits re-read the same doubles
    assert np.array_equal(columns['x_1'], traj.states[:, 1])
    assert np.array_equal(columns['z_0'], traj.z_values[:, 0])
    assert np.all(np.isnan(columns['dist_to_star']))


def test_exit_codes_for_errors():
    assert exit_code_for(ConfigError(['x: bad'])) == EXIT_CONFIG
    assert exit_code_for(ConvergenceError("stuck", 3)) == EXIT_SOLVER
    assert exit_code_for(InfeasibleReferenceError([7.0], [0.5, 6.0])) == EXIT_INFEASIBLE
    with pytest.raises(KeyError):
        exit_code_for(KeyError('not mapped'))


def test_simulate_command_writes_artifacts(tmp_path, capsys):
    config = write_config(tmp_path, rlc_data(output={'csv_path': 'traj.csv', 'summary_path': 'summary.json'}))
    assert main(['simulate', config, '--out-dir', str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / 'summary.json').read_text(encoding='utf-8'))
    assert summary['exit_code'] == 0
    assert summary['u_star'] == pytest.approx([1.0])
    assert summary['steps'] == 100
    columns = read_trajectory_csv(tmp_path / 'traj.csv')
    assert len(columns['t']) == 101
    assert json.loads(capsys.readouterr().out)['name'] == 'rlc_test'


def test_infeasible_reference_exits_4(tmp_path):
    data = rlc_data(controller={'r': [100.0], 'K': {'type': 'box', 'lower': [0.25], 'upper': [3.0]}})
    config = write_config(tmp_path, data)
    assert main(['simulate', config, '--out-dir', str(tmp_path)]) == EXIT_INFEASIBLE
    summary = json.loads((tmp_path / 'summary.json').read_text(encoding='utf-8'))
    assert summary['exit_code'] == EXIT_INFEASIBLE
    assert 'not attainable' in summary['message']


def test_invalid_plant_parameter_exits_1(tmp_path):
    config = write_config(tmp_path, rlc_data(plant={'plant': 'rlc', 'R': -1.0}))
    assert main(['simulate', config, '--out-dir', str(tmp_path)]) == EXIT_CONFIG


def test_invalid_config_exits_1(tmp_path, capsys):
    config = write_config(tmp_path, rlc_data(integrator={'h': 0.01, 'T': 1.0, 'solver_tol': 0.0}))
    assert main(['simulate', config, '--out-dir', str(tmp_path)]) == EXIT_CONFIG
    assert 'integrator.solver_tol' in capsys.readouterr().err
    assert main(['simulate', '--out-dir', str(tmp_path)]) == EXIT_CONFIG


def test_steady_and_feasible_commands(capsys):
    config = str(CONFIGS / 'rlc_demo.json')
    assert main(['steady', config, '--u', '1']) == EXIT_OK
    assert json.loads(capsys.readouterr().out)['x_star'] == pytest.approx([2.0, 1.0, 0.0])
    assert main(['feasible', config, '--r', '2']) == EXIT_OK
    assert json.loads(capsys.readouterr().out)['u_star'] == pytest.approx([1.0], abs=1e-9)
    assert main(['feasible', config, '--r', '100']) == EXIT_INFEASIBLE


def test_verify_short_horizon_fails_convergence(tmp_path):
    config = write_config(tmp_path, rlc_data(output={'report_path': 'report.json'},
                                             verification={'n_pairs': 3, 'n_starts': 2, 'seed': 3}))
    assert main(['verify', config, '--out-dir', str(tmp_path), *SHORT]) == EXIT_VERIFICATION
    report = json.loads((tmp_path / 'report.json').read_text(encoding='utf-8'))
    assert report['passed'] is False
    failed = {rec['name'] for rec in report['records'] if not rec['passed']}
    assert 'convergence' in failed
    assert 'constraints' not in failed


def test_verify_pde_demo_energy_balance(tmp_path):
    """The stiff initial layer of the p-Laplacian demo keeps the first-order energy defect."""
    config = str(CONFIGS / 'plaplacian_demo.json')
    code = main(['verify', config, '--out-dir', str(tmp_path), '--horizon', '2'])
    assert code in (EXIT_OK, EXIT_VERIFICATION)
    report = json.loads((tmp_path / 'plaplacian_report.json').read_text(encoding='utf-8'))
    records = {rec['name']: rec for rec in report['records']}
    energy = records['energy_inequality']
    assert energy['passed']
    assert 1.5 <= energy['details']['ratio'] <= 3.0
    assert records['constraints']['passed'] and records['contraction']['passed']


def test_sweep_command(tmp_path, monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    config = str(CONFIGS / 'rlc_sweep.json')
    assert main(['sweep', config, '--out-dir', str(tmp_path), *SHORT]) == EXIT_OK
    with (tmp_path / 'sweep.csv').open(newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    assert [float(row['value']) for row in rows] == [0.3, 0.5, 2.0, 6.0, 7.0]
    assert [int(row['exit_code']) for row in rows] == [4, 0, 0, 0, 4]
    assert json.loads(rows[1]['u_star']) == pytest.approx([0.25])
    assert (tmp_path / 'r=2' / 'trajectory.csv').exists()


def test_sweep_threads_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, '3')
    assert sweep_threads() == 3
    monkeypatch.setenv(THREADS_ENV, 'many')
    assert sweep_threads() == 1


def test_plaplacian_field_snapshot(tmp_path):
    data = json.loads((CONFIGS / 'plaplacian_demo.json').read_text(encoding='utf-8'))
    data['plant'] = {'plant': 'plaplacian', 'p': 4, 'n_grid': 41}
    scenario = parse_config(data).with_overrides(horizon=0.05)
    summary = run_scenario(scenario, tmp_path)
    assert summary.exit_code == EXIT_OK
    with (tmp_path / 'plaplacian_field.csv').open(newline='', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['node', 'x', 'w']
    assert len(rows) == 42


def main_runner():
    """Run the config tests that need no temporary directory."""
    print("=" * 60)
    print("Config and CLI Tests")
    print("=" * 60)
    test_scalar_reference_is_broadcast()
    test_all_errors_are_collected()
    test_exit_codes_for_errors()
    print("✓ All tests passed")


if __name__ == '__main__':
    main_runner()
