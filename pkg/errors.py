"""
Exception hierarchy shared by the library, the CLI and the inference API.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional

import numpy as np


class IwslError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class TopologyError(IwslError, ValueError):
    """Malformed scene-graph topology"""
    exit_code = 2


class NodeLookupError(IwslError, KeyError):
    """Reference to a node that does not exist in the graph"""
    exit_code = 2

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class DimensionError(IwslError, ValueError):
    """Array shapes do not agree"""
    exit_code = 3


class DomainError(IwslError, ValueError):
    """Argument outside the mathematical domain of an operation"""
    exit_code = 3


class CapacityError(IwslError, RuntimeError):
    """Enumeration guard exceeded"""
    exit_code = 2


class ConfigError(IwslError, ValueError):
    """Invalid, unknown or missing configuration"""
    exit_code = 2


class OptimizerError(IwslError, RuntimeError):
    """Mirror descent met a non-finite objective"""
    exit_code = 3

    def __init__(self, message: str, last_pi: Optional[np.ndarray] = None):
        super().__init__(message)
        self.last_pi = last_pi


class NumericalError(IwslError, RuntimeError):
    """Training diverged; carries the last finite θ and the temperature at failure"""
    exit_code = 3

    def __init__(self, message: str, last_theta=None, iteration: int = 0, tau: Optional[float] = None):
        super().__init__(message)
        self.last_theta = last_theta
        self.iteration = iteration
        self.tau = tau
