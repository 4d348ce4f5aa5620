"""
Trajectory Files
CSV and JSON writers (and a CSV reader) for simulation artifacts
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def format_float(value: float) -> str:
    """17 significant digits, enough to re-read the same double; NaN becomes an empty cell."""
    if value is None or np.isnan(value):
        return ''
    return format(float(value), '.17g')


def parse_float(cell: str) -> float:
    return float(cell) if cell != '' else float('nan')


def trajectory_header(state_dim: int, input_dim: int) -> List[str]:
    return (['t'] + [f'x_{i}' for i in range(state_dim)] + [f'z_{i}' for i in range(input_dim)]
            + [f'y_{i}' for i in range(input_dim)] + ['h_value', 'dist_to_star'])


def write_trajectory_csv(trajectory, path: PathLike) -> Path:
    """
    Write one row per sample: t, x_i, z_i, y_i, h_value, dist_to_star.

    Args:
        trajectory: Trajectory to write
        path: Output file; parent directories are created

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = trajectory_header(trajectory.states.shape[1], trajectory.z_values.shape[1])
    with path.open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in trajectory.to_rows():
            writer.writerow([format_float(v) for v in row])
    logger.info("Wrote %d trajectory rows to %s", len(trajectory), path)
    return path


def read_trajectory_csv(path: PathLike) -> Dict[str, np.ndarray]:
    """Read a trajectory CSV back into columns keyed by header name."""
    with Path(path).open('r', newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[parse_float(cell) for cell in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_json(data: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=False), encoding='utf-8')
    logger.info("Wrote %s", path)
    return path


def write_field_csv(nodes: np.ndarray, w: np.ndarray, path: PathLike) -> Path:
    """Field snapshot: node index, x-coordinate, w."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['node', 'x', 'w'])
        for i, (x, value) in enumerate(zip(nodes, w)):
            writer.writerow([i, format_float(x), format_float(value)])
    return path


def write_rows_csv(rows: List[Dict[str, Any]], fieldnames: List[str], path: PathLike) -> Path:
    """Summary table with one dict per row, floats at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: format_float(v) if isinstance(v, float) else v for key, v in row.items()})
    return path
