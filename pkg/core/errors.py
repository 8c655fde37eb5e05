"""
Typed errors raised by the solver
Each carries the diagnostic payload the CLI reports before exiting
"""
from typing import List, Optional, Sequence

import numpy as np


class SolverError(Exception):
    """Base class for every error raised by the solver"""


class ConfigurationError(SolverError):
    """Bad run configuration, model parameters or missing derivative callbacks"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class HypothesisViolationError(SolverError):
    """A coefficient left the range a hypothesis guarantees"""

    def __init__(self, message: str, point: Optional[dict] = None):
        self.point = point or {}
        if self.point:
            where = ", ".join(f"{k}={_fmt(v)}" for k, v in self.point.items())
            message = f"{message} at ({where})"
        super().__init__(message)


class IntegrabilityViolationError(SolverError):
    """Radial integral of the integrability functional does not settle"""

    def __init__(self, message: str, tail_fraction: float = float("nan")):
        self.tail_fraction = tail_fraction
        super().__init__(message)


class IntegrationFailureError(SolverError):
    """ODE integration could not proceed"""

    def __init__(self, message: str, last_good_time: float):
        self.last_good_time = last_good_time
        super().__init__(f"{message} (last good time {last_good_time:.6g})")


class SimulationBlowUpError(SolverError):
    """Particle states became non-finite"""

    def __init__(self, step: int, time: float, n_bad: int):
        self.step = step
        self.time = time
        self.n_bad = n_bad
        super().__init__(f"{n_bad} non-finite particle states at step {step} (t={time:.6g})")


class DomainError(SolverError, ValueError):
    """Evaluation outside the domain an object is defined on"""


class PathDomainError(DomainError):
    """Quantile path evaluated outside its time range"""


class DegenerateFamilyError(SolverError):
    """No candidate K gives a positive density floor on the K-box"""


class PreconditionError(SolverError):
    """A documented precondition failed; `predicate` names which one"""

    def __init__(self, message: str, predicate: str):
        self.predicate = predicate
        super().__init__(f"[{predicate}] {message}")


class ConstantTooLargeError(SolverError):
    """No positive interval length reaches the requested contraction rate"""


class InsufficientSignalError(SolverError):
    """Measured distances cannot support a slope fit"""


class NonContractionError(SolverError):
    """Picard iteration did not contract"""

    def __init__(self, message: str, deltas: Sequence[float], interval_index: int = 0):
        self.deltas: List[float] = [float(d) for d in deltas]
        self.interval_index = interval_index
        history = ", ".join(f"{d:.3e}" for d in self.deltas)
        super().__init__(f"{message} (interval {interval_index}; deltas: {history})")


def _fmt(value) -> str:
    if isinstance(value, np.ndarray):
        return np.array2string(value, precision=4, separator=",")
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
