"""Plants of the closed-loop library and the registry that builds them from config blocks."""
from typing import Any, Callable, Dict

from core.inclusion import Plant

from .linear_node import build_linear_node
from .plaplacian import build_plaplacian
from .rlc import build_rlc

BUILDERS: Dict[str, Callable[[Dict[str, Any]], Plant]] = {
    'rlc': build_rlc,
    'linear_node': build_linear_node,
    'plaplacian': build_plaplacian,
}


def build_plant(block: Dict[str, Any]) -> Plant:
    """
    Build a plant from its tagged config block.

    Args:
        block: e.g. {"plant": "rlc", "C": 1, "L1": 1, "L2": 1, "R": 2}

    Returns:
        The plant

    Raises:
        ValueError: If the tag is unknown or a parameter is invalid
    """
    kind = block.get('plant')
    if kind not in BUILDERS:
        raise ValueError(f"unknown plant '{kind}', expected one of {sorted(BUILDERS)}")
    return BUILDERS[kind](block)
