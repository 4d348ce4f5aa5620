"""
Error Types
Exceptions shared by the solvers, the simulation loop and the CLI
"""
from typing import List, Optional, Sequence


class DimensionMismatchError(ValueError):
    """Raised when a vector does not have the dimension a set or plant expects."""

    def __init__(self, expected: int, actual: int, what: str = "vector"):
        super().__init__(f"{what} has dimension {actual}, expected {expected}")
        self.expected = expected
        self.actual = actual


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver stops before reaching its tolerance."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float('nan')):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class InfeasibleReferenceError(ValueError):
    """
    Raised when no constant input inside K produces the requested output.

    Attributes:
        reference: The reference that was requested
        attainable: For scalar inputs, the interval of outputs reachable from K
    """

    def __init__(self, reference: Sequence[float], attainable: Optional[Sequence[float]] = None):
        message = f"reference {list(reference)} is not attainable with inputs in K"
        if attainable is not None:
            message += f"; attainable outputs lie in [{attainable[0]:.6g}, {attainable[1]:.6g}]"
        super().__init__(message)
        self.reference = list(reference)
        self.attainable = None if attainable is None else list(attainable)


class SimulationError(RuntimeError):
    """Raised when a time step fails even after the half-step retry."""

    def __init__(self, message: str, trajectory=None, step_index: int = -1):
        super().__init__(message)
        self.trajectory = trajectory
        self.step_index = step_index


class ConfigError(ValueError):
    """Raised with every schema error found in a scenario file."""

    def __init__(self, errors: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = list(errors)
