"""
Quantile paths and particle ensembles
"""
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.errors import PathDomainError
from models.model_spec import as_float_array

# Relative slack when checking s against the path's time range
_DOMAIN_SLACK = 1e-12


class QuantilePath(BaseModel):
    """Piecewise-linear path omega: [times[0], times[-1]] -> R^n"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    times: np.ndarray   # (m,)
    values: np.ndarray  # (m, n)

    @field_validator("times", mode="before")
    @classmethod
    def _times_array(cls, value):
        return as_float_array(np.atleast_1d(value))

    @field_validator("values", mode="before")
    @classmethod
    def _values_array(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        return as_float_array(arr)

    @model_validator(mode="after")
    def _check_grid(self):
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("times must be a non-empty 1-d grid")
        if self.values.ndim != 2 or self.values.shape[0] != self.times.size:
            raise ValueError(
                f"values shape {self.values.shape} does not match {self.times.size} time nodes"
            )
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.times)):
            raise ValueError("quantile path contains non-finite entries")
        return self

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @classmethod
    def constant(cls, value, t_end: float, t_start: float = 0.0) -> "QuantilePath":
        """Path held at `value` on [t_start, t_end]"""
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        if t_end <= t_start:
            return cls(times=[t_start], values=value[None, :])
        return cls(times=[t_start, t_end], values=np.vstack([value, value]))

    @classmethod
    def from_function(cls, func, times: Sequence[float]) -> "QuantilePath":
        """Sample func(t) -> (n,) on the given grid"""
        times = np.asarray(times, dtype=np.float64)
        return cls(times=times, values=np.vstack([np.atleast_1d(func(float(t))) for t in times]))

    def covers(self, s: float) -> bool:
        slack = _DOMAIN_SLACK * max(1.0, abs(s))
        return self.t_start - slack <= s <= self.t_end + slack

    def at(self, s: float) -> np.ndarray:
        """Linear interpolation at time s; raises PathDomainError outside the grid"""
        if not self.covers(s):
            raise PathDomainError(
                f"path defined on [{self.t_start:.6g}, {self.t_end:.6g}], evaluated at {s:.6g}"
            )
        if self.times.size == 1:
            return self.values[0].copy()
        s = min(max(s, self.t_start), self.t_end)
        k = int(np.searchsorted(self.times, s, side="right")) - 1
        k = min(max(k, 0), self.times.size - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        w = (s - t0) / (t1 - t0)
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def on_grid(self, times: Sequence[float]) -> np.ndarray:
        """Evaluate at each time; returns (len(times), n)"""
        return np.vstack([self.at(float(s)) for s in times])

    def restrict(self, t_start: float, t_end: float) -> "QuantilePath":
        """Sub-path on [t_start, t_end] keeping interior nodes"""
        if not (self.covers(t_start) and self.covers(t_end)) or t_end < t_start:
            raise PathDomainError(f"cannot restrict path to [{t_start:.6g}, {t_end:.6g}]")
        inner = self.times[(self.times > t_start) & (self.times < t_end)]
        grid = np.concatenate([[t_start], inner, [t_end]]) if t_end > t_start else np.array([t_start])
        return QuantilePath(times=grid, values=self.on_grid(grid))

    def shifted(self, delta) -> "QuantilePath":
        """Add a constant vector (or a function of t) to every node"""
        if callable(delta):
            offsets = np.vstack([np.atleast_1d(delta(float(t))) for t in self.times])
        else:
            offsets = np.atleast_1d(np.asarray(delta, dtype=np.float64))[None, :]
        return QuantilePath(times=self.times, values=self.values + offsets)

    def sup_distance(self, other: "QuantilePath") -> float:
        """
        Sup norm of the difference over the common domain
        Exact for piecewise-linear paths: the max sits on a breakpoint of either grid
        """
        lo = max(self.t_start, other.t_start)
        hi = min(self.t_end, other.t_end)
        if hi < lo:
            raise PathDomainError("paths have disjoint time ranges")
        grid = np.union1d(self.times, other.times)
        grid = grid[(grid >= lo) & (grid <= hi)]
        grid = np.union1d(grid, [lo, hi])
        return float(np.max(np.abs(self.on_grid(grid) - other.on_grid(grid))))

    def concat(self, other: "QuantilePath") -> "QuantilePath":
        """Append a path starting where this one ends; the junction node keeps the later value"""
        if abs(other.t_start - self.t_end) > _DOMAIN_SLACK * max(1.0, abs(self.t_end)):
            raise PathDomainError(
                f"cannot join path ending at {self.t_end:.6g} with one starting at {other.t_start:.6g}"
            )
        return QuantilePath(
            times=np.concatenate([self.times[:-1], other.times]),
            values=np.vstack([self.values[:-1], other.values]),
        )


class ParticleEnsemble(BaseModel):
    """Terminal states of N particles with seed provenance"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray  # (N, n)
    t: float
    seed: int = Field(0, ge=0)
    dt: float = Field(0.0, ge=0)
    stream: int = 0
    path: Optional[QuantilePath] = None  # quantile path recorded along the run, if any

    @field_validator("states", mode="before")
    @classmethod
    def _states_array(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        return as_float_array(arr)

    @model_validator(mode="after")
    def _check_states(self):
        if self.states.ndim != 2:
            raise ValueError("states must be an (N, n) array")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("ensemble contains non-finite states")
        return self

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @classmethod
    def point(cls, x, N: int, t: float = 0.0) -> "ParticleEnsemble":
        """N copies of the point x (a Dirac initial law)"""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return cls(states=np.tile(x, (N, 1)), t=t)

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def variance(self) -> np.ndarray:
        return self.states.var(axis=0, ddof=1)
