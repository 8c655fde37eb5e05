"""
Run configuration: one model section, Monte Carlo and solver parameters,
output location and the verification battery to run
"""
import os
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config

# Names accepted by `verify --check` and the [verify] checks key
KNOWN_CHECKS = (
    "hypotheses",
    "flow_bounds",
    "scaling",
    "gaussian_bounds",
    "tail",
    "lower_bound",
    "stability",
    "lipschitz",
    "fk",
)


def _split_list(value):
    """'0.1, 0.2' -> ['0.1', '0.2']; lists pass through"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(Section):
    """Coefficient family, its parameters and the initial law"""
    family: Literal["kolmogorov", "mean_reverting", "linear_chain", "zero_drift"]
    n: int = Field(gt=0)
    T: float = Field(gt=0)
    alpha: List[float] = [0.5]
    coupling: float = 1.0
    sigma0: float = Field(1.0, gt=0)
    theta: float = 1.0                      # mean_reverting
    A: Optional[List[float]] = None         # linear_chain, row-major n*n
    B: Optional[List[float]] = None
    c: Optional[List[float]] = None
    sigma_amplitude: float = 0.0
    sigma_frequency: float = 1.0
    drift_amplitude: float = 0.0
    drift_frequency: float = 1.0
    kappa: Optional[float] = Field(None, gt=0)
    Lambda: Optional[float] = Field(None, ge=1)
    eta: float = Field(1.0, gt=0, le=1)
    init: Literal["gaussian", "ensemble"] = "gaussian"
    init_mean: List[float] = [0.0]
    init_var: List[float] = [1.0]
    init_file: Optional[str] = None

    @field_validator("alpha", "A", "B", "c", "init_mean", "init_var", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_family(self):
        if self.family == "linear_chain" and self.A is None:
            raise ValueError("linear_chain needs A (row-major n*n)")
        if self.init == "ensemble" and not self.init_file:
            raise ValueError("init = ensemble needs init_file")
        if self.init_file and not os.path.exists(self.init_file):
            raise ValueError(f"init_file not found: {self.init_file}")
        return self


class MCSection(Section):
    N: int = Field(config.DEFAULT_N_PARTICLES, ge=100)
    dt: float = Field(config.DEFAULT_DT, gt=0)
    seed: int = Field(config.DEFAULT_SEED, ge=0, lt=2**64)
    threads: int = Field(config.WORKER_THREADS, ge=0)
    thin: int = Field(config.PATH_THINNING, ge=1)


class SolverSection(Section):
    t0_policy: Literal["fixed", "auto"] = "fixed"
    t0: Optional[float] = Field(None, gt=0)
    tol: float = Field(config.PICARD_TOLERANCE, gt=0)
    max_iter: int = Field(config.PICARD_MAX_ITER, ge=1)
    target_L: float = Field(config.TARGET_CONTRACTION, gt=0, le=1)
    snapshot_times: List[float] = []
    cross_validate: bool = True

    @field_validator("snapshot_times", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)


class OutputSection(Section):
    dir: str = config.OUTPUT_DIR
    binary_ensemble: bool = False


class VerifySection(Section):
    checks: List[str] = list(KNOWN_CHECKS)
    times: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    t: float = Field(0.5, gt=0)              # time of pointwise checks
    eps: float = Field(0.05, gt=0, lt=0.5)
    pairs: int = Field(5, ge=5)
    lipschitz_pairs: int = Field(100, ge=1)
    probe_points: int = Field(50, ge=1)
    fk_N: int = Field(20000, ge=100)
    fk_points: Optional[str] = None          # CSV of (t, x1..xn)

    @field_validator("checks", "times", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @field_validator("checks")
    @classmethod
    def _known_checks(cls, value):
        unknown = [c for c in value if c not in KNOWN_CHECKS]
        if unknown:
            raise ValueError(f"unknown checks {unknown}; known: {', '.join(KNOWN_CHECKS)}")
        return value

    @field_validator("fk_points")
    @classmethod
    def _points_exist(cls, value):
        if value and not os.path.exists(value):
            raise ValueError(f"fk_points file not found: {value}")
        return value


class RunConfig(Section):
    model: ModelSection
    mc: MCSection = MCSection()
    solver: SolverSection = SolverSection()
    output: OutputSection = OutputSection()
    verify: VerifySection = VerifySection()

    @model_validator(mode="after")
    def _check_steps(self):
        if self.solver.t0_policy == "fixed":
            if self.solver.t0 is None:
                raise ValueError("solver.t0 is required when t0_policy = fixed")
            if self.mc.dt > self.solver.t0 / 10.0:
                raise ValueError(f"mc.dt={self.mc.dt:g} must not exceed solver.t0/10={self.solver.t0 / 10.0:g}")
            if self.solver.t0 > self.model.T:
                raise ValueError("solver.t0 exceeds model.T")
        return self
