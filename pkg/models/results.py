"""
Report and estimate models returned by the solver and the check battery
"""
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class Report(BaseModel):
    """Base for immutable reports; `to_record` gives a flat key-value view"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def to_record(self) -> Dict[str, Any]:
        return self.model_dump()


# =============================================================================
# MODEL / HYPOTHESES
# =============================================================================

class HypothesisCheck(Report):
    """One probed hypothesis"""
    name: str
    description: str
    passed: bool
    worst_value: float
    bound: float
    witness: Dict[str, Any] = {}


class HypothesisReport(Report):
    model_name: str
    n_points: int
    radius: float
    checks: List[HypothesisCheck]
    status: str = "probed"  # sampled, never certified

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> List[HypothesisCheck]:
        return [c for c in self.checks if not c.passed]


class IntegrabilityReport(Report):
    """Radial quadrature of the integrability functional of f"""
    U: float
    U_local: float
    f_term: float
    grad_term: float
    tail_fraction: float
    truncation_radius: float
    eps: float


# =============================================================================
# FLOW
# =============================================================================

class FlowResult(Report):
    theta: np.ndarray                   # (n,)
    log_jac_det: float
    jacobian: Optional[np.ndarray] = None  # (n, n)
    path_times: Optional[np.ndarray] = None
    path: Optional[np.ndarray] = None       # (k, n)
    path_log_det: Optional[np.ndarray] = None


class BoundCheck(Report):
    name: str
    violations: int
    worst_margin: float
    witness: Dict[str, Any] = {}


class BoundReport(Report):
    """Two-sided flow bounds evaluated on random probes"""
    n_probes: int
    checks: List[BoundCheck]
    identity_error: float = 0.0  # max |theta(inverse(x)) - x|

    @property
    def passed(self) -> bool:
        return all(c.violations == 0 for c in self.checks)


# =============================================================================
# FEYNMAN-KAC
# =============================================================================

class FKSample(Report):
    terminal: np.ndarray
    exponent: float
    jacobian: Optional[np.ndarray] = None


class FKSamples(Report):
    """Backward Feynman-Kac paths started at x and run for time t"""
    x: np.ndarray
    t: float
    dt: float
    seed: int
    terminal: np.ndarray                        # (N, n)
    exponent: np.ndarray                        # (N,)
    jacobian: Optional[np.ndarray] = None       # (N, n, n)
    c_grad_integral: Optional[np.ndarray] = None  # (N, n), integral of grad c . J

    def __len__(self) -> int:
        return self.terminal.shape[0]

    def sample(self, i: int) -> FKSample:
        return FKSample(
            terminal=self.terminal[i],
            exponent=float(self.exponent[i]),
            jacobian=None if self.jacobian is None else self.jacobian[i],
        )


class FKEstimate(Report):
    value: float
    stderr: float
    N: int
    x: np.ndarray
    t: float
    near_initial: bool = False


class FKGradientEstimate(Report):
    value: np.ndarray
    stderr: np.ndarray
    N: int
    x: np.ndarray
    t: float
    near_initial: bool = False


class UprimeEstimate(Report):
    value: float
    finite: bool
    truncation_radius: float
    tail_fraction: float
    t0: float
    times: List[float]
    diagnostics: Dict[str, Any] = {}


# =============================================================================
# DENSITY
# =============================================================================

class SParams(Report):
    K: float = Field(gt=0)
    delta: float = Field(gt=0)
    eps: float = Field(gt=0)

    def admissible_for(self, alpha) -> bool:
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.eps < float(np.min(np.minimum(alpha, 1.0 - alpha)))


class SMembership(Report):
    """Membership of one density in the set S with per-condition margins"""
    tail_mass: float
    tail_margin: float       # eps - tail mass
    quantile: np.ndarray
    quantile_margin: float   # K - max |Q_alpha|
    floor: float
    floor_margin: float      # density floor on the K-box minus delta

    @property
    def member(self) -> bool:
        return self.tail_margin >= 0 and self.quantile_margin >= 0 and self.floor_margin >= 0

    @property
    def failed_predicate(self) -> Optional[str]:
        if self.tail_margin < 0:
            return "tail_mass"
        if self.quantile_margin < 0:
            return "quantile_in_box"
        if self.floor_margin < 0:
            return "density_floor"
        return None


class CheckResult(Report):
    name: str
    passed: bool
    lhs: float
    rhs: float
    margin: float
    details: Dict[str, Any] = {}


# =============================================================================
# FIXED POINT
# =============================================================================

class IntervalRecord(Report):
    index: int
    t_start: float
    t_end: float
    iterations: int
    deltas: List[float]
    L_hat: float
    converged: bool
    recheck_delta: Optional[float] = None


class FixedPointReport(Report):
    iterations: int
    deltas: List[float]
    L_hat: float
    t0: float
    tolerance: float
    converged: bool
    tolerance_achieved: float
    recheck_delta: Optional[float] = None
    chained_intervals: List[IntervalRecord] = []
    junction_gaps: List[float] = []


class CrossValidationReport(Report):
    discrepancy: float
    argmax_time: float
    combined_stderr: float
    threshold: float
    within_tolerance: bool
    N: int
    dt: float


class ContractionReport(Report):
    """Constants behind the interval length and the measured contraction"""
    C0: float
    K: float
    delta: float
    eps: float
    t0: float
    theoretical_L: float
    fixed_point: FixedPointReport


# =============================================================================
# VERIFICATION BATTERY
# =============================================================================

class ScalingReport(Report):
    n: int
    times: List[float]
    variances: List[List[float]]   # per time, per coordinate
    slopes: List[float]
    expected: List[float]
    tolerance: float
    passed: bool


class GaussianBoundReport(Report):
    t: float
    C: float
    C_lower: float
    C_upper: float
    n_points: int
    n_masked: int
    unfittable: List[Dict[str, Any]] = []
    margins: List[Dict[str, float]] = []
    passed: bool


class TailReport(Report):
    K: float
    eps: float
    max_tail_mass: float
    table: List[Dict[str, float]] = []
    passed: bool


class LowerBoundReport(Report):
    K: float
    delta: float
    stderr: float
    argmin: Dict[str, Any] = {}
    oracle_delta: Optional[float] = None
    relative_error: Optional[float] = None
    passed: bool


class StabilityRow(Report):
    pair_index: int
    t: float
    lhs: float
    rhs: float
    passed: bool


class StabilityReport(Report):
    C0: float
    n_pairs: int
    rows: List[StabilityRow]
    passed: bool


class LipschitzSweepReport(Report):
    """Quantile-Lipschitz inequality over a batch of density pairs"""
    n_cases: int
    violations: int
    worst_margin: float
    passed: bool
