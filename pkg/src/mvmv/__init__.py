"""Reflected McKean-Vlasov SDEs: solvers, rate functions and deviation experiments."""

from .errors import (ConfigError, InfeasibleTargetError, InsufficientDataError,
                     InvalidArgumentError, MvmvError, SolverDivergenceError)

__version__ = "0.1.0"

__all__ = [
    "MvmvError",
    "InvalidArgumentError",
    "SolverDivergenceError",
    "InfeasibleTargetError",
    "InsufficientDataError",
    "ConfigError",
]
