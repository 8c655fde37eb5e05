"""
Density estimates of particle ensembles, quantiles, L1 distances, tail mass,
and membership in the set S of densities with tail mass <= eps outside the
K-box, quantile inside it and a floor delta on it.
"""
import itertools
import math
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq
from scipy.signal import fftconvolve

import config
from core.errors import DegenerateFamilyError, DomainError, PreconditionError
from models.model_spec import L1Plan, as_float_array
from models.paths import ParticleEnsemble
from models.results import CheckResult, SMembership, SParams
from utils.logger import get_logger

logger = get_logger(__name__)

# Kernel support in bandwidths when rendered on a grid
_KERNEL_REACH = 5.0
# Cap on (points x samples) per kernel evaluation chunk
_EVAL_CHUNK = 4_000_000


def _alpha_vector(alpha, n: int) -> np.ndarray:
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if alpha.size == 1 and n > 1:
        alpha = np.full(n, float(alpha[0]))
    if alpha.shape != (n,) or np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise DomainError(f"alpha must have {n} components in (0, 1), got {alpha}")
    return alpha


def empirical_quantile(states, alpha) -> np.ndarray:
    """
    Component-wise alpha_j-quantile as the order statistic of 1-based index
    ceil(alpha_j N) (left-continuous infimum convention)
    """
    X = np.asarray(states, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N, n = X.shape
    if N == 0:
        raise DomainError("quantile of an empty ensemble")
    alpha = _alpha_vector(alpha, n)
    out = np.empty(n)
    for j in range(n):
        k = min(N, max(1, int(math.ceil(alpha[j] * N * (1.0 - 1e-12)))))
        out[j] = np.partition(X[:, j], k - 1)[k - 1]
    return out


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """0.9 * min(std, IQR / 1.34) * N^(-1/5) per coordinate"""
    N = samples.shape[0]
    std = samples.std(axis=0, ddof=1) if N > 1 else np.zeros(samples.shape[1])
    q75, q25 = np.percentile(samples, [75, 25], axis=0)
    spread = np.minimum(std, (q75 - q25) / 1.34)
    spread = np.where(spread > 0.0, spread, std)
    if np.any(spread <= 0.0):
        raise DomainError("samples are degenerate in at least one coordinate; no bandwidth")
    return 0.9 * spread * N ** (-0.2)


class GridSpec(BaseModel):
    """Regular box grid of cell midpoints"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lower: np.ndarray
    upper: np.ndarray
    nodes: Tuple[int, ...]

    @field_validator("lower", "upper", mode="before")
    @classmethod
    def _arrays(cls, value):
        return as_float_array(np.atleast_1d(value))

    @classmethod
    def box(cls, lower, upper, nodes: int) -> "GridSpec":
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        return cls(lower=lower, upper=upper, nodes=tuple([int(nodes)] * lower.size))

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.nodes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> List[np.ndarray]:
        return [self.lower[j] + (np.arange(self.nodes[j]) + 0.5) * self.spacing[j] for j in range(self.n)]

    def points(self) -> np.ndarray:
        """(prod(nodes), n) midpoints in C order"""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def same_as(self, other: "GridSpec") -> bool:
        return (self.nodes == other.nodes and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))


def _linear_binning(samples: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Spread each sample over the 2^n surrounding midpoints with linear weights"""
    axes0 = np.array([ax[0] for ax in grid.axes])
    pos = (samples - axes0) / grid.spacing
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    counts = np.zeros(grid.nodes)
    shape = np.asarray(grid.nodes)
    for corner in itertools.product((0, 1), repeat=grid.n):
        corner = np.asarray(corner)
        idx = base + corner
        weight = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        valid = np.all((idx >= 0) & (idx < shape), axis=1)
        np.add.at(counts, tuple(idx[valid].T), weight[valid])
    return counts


def _render_kernel(samples: np.ndarray, bandwidth: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Binned Gaussian KDE on the grid midpoints via FFT convolution"""
    counts = _linear_binning(samples, grid)
    kernel = np.ones([1] * grid.n)
    for j in range(grid.n):
        reach = max(1, int(math.ceil(_KERNEL_REACH * bandwidth[j] / grid.spacing[j])))
        offsets = np.arange(-reach, reach + 1) * grid.spacing[j]
        w = stats.norm.pdf(offsets / bandwidth[j]) / bandwidth[j]
        w /= w.sum() * grid.spacing[j]
        shape = [1] * grid.n
        shape[j] = w.size
        kernel = kernel * w.reshape(shape)
    values = fftconvolve(counts, kernel, mode="same") / samples.shape[0]
    return np.clip(values, 0.0, None)


class DensityEstimate(BaseModel):
    """
    Kernel estimate over samples (product Gaussian kernels) or values on a
    regular box grid. Immutable after construction.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["kernel", "grid"]
    n: int = Field(gt=0)
    samples: Optional[np.ndarray] = None    # (N, n), kernel kind
    bandwidth: Optional[np.ndarray] = None  # (n,), kernel kind
    grid: Optional[GridSpec] = None         # grid kind
    values: Optional[np.ndarray] = None     # grid.nodes, grid kind
    mass: float = 1.0
    label: str = ""

    # ---- constructors -------------------------------------------------------

    @classmethod
    def from_ensemble(cls, ensemble: Union[ParticleEnsemble, np.ndarray], bandwidth=None,
                      label: str = "") -> "DensityEstimate":
        states = ensemble.states if isinstance(ensemble, ParticleEnsemble) else np.asarray(ensemble, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] == 0:
            raise DomainError("density of an empty ensemble")
        bw = silverman_bandwidth(states) if bandwidth is None else np.broadcast_to(
            np.asarray(bandwidth, dtype=np.float64), (states.shape[1],)).copy()
        if np.any(bw <= 0.0):
            raise DomainError("bandwidth must be positive")
        return cls(kind="kernel", n=states.shape[1], samples=as_float_array(states),
                   bandwidth=as_float_array(bw), mass=1.0, label=label)

    @classmethod
    def from_grid(cls, grid: GridSpec, values: np.ndarray, label: str = "") -> "DensityEstimate":
        values = np.asarray(values, dtype=np.float64).reshape(grid.nodes)
        if np.any(values < 0.0):
            raise DomainError("grid density has negative values")
        return cls(kind="grid", n=grid.n, grid=grid, values=as_float_array(values),
                   mass=float(values.sum() * grid.cell_volume), label=label)

    @classmethod
    def from_pdf(cls, pdf: Callable, lower, upper, nodes: int, label: str = "") -> "DensityEstimate":
        """Exact density pdf(x: (M, n)) -> (M,) sampled at grid midpoints"""
        grid = GridSpec.box(lower, upper, nodes)
        return cls.from_grid(grid, np.asarray(pdf(grid.points()), dtype=np.float64), label=label)

    # ---- evaluation ---------------------------------------------------------

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "grid":
            interp = RegularGridInterpolator(self.grid.axes, self.values, bounds_error=False, fill_value=0.0)
            return np.clip(interp(x), 0.0, None)
        N = self.samples.shape[0]
        norm = 1.0 / (N * np.prod(self.bandwidth) * (2.0 * math.pi) ** (self.n / 2.0))
        chunk = max(1, _EVAL_CHUNK // max(N, 1))
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], chunk):
            block = x[start:start + chunk]
            z = (block[:, None, :] - self.samples[None, :, :]) / self.bandwidth
            out[start:start + chunk] = norm * np.exp(-0.5 * np.sum(z * z, axis=2)).sum(axis=1)
        return out

    def std(self) -> np.ndarray:
        if self.kind == "kernel":
            return np.sqrt(self.samples.var(axis=0) + self.bandwidth ** 2)
        marg = [self._marginal_cells(j) for j in range(self.n)]
        out = np.empty(self.n)
        for j, (mids, mass) in enumerate(marg):
            p = mass / mass.sum()
            mean = float(np.sum(p * mids))
            out[j] = math.sqrt(float(np.sum(p * (mids - mean) ** 2)))
        return out

    def box(self, sigmas: float = config.L1_BOX_SIGMAS) -> Tuple[np.ndarray, np.ndarray]:
        """Evaluation box: grid bounds, or mean +- sigmas * std for kernels"""
        if self.kind == "grid":
            return self.grid.lower.copy(), self.grid.upper.copy()
        mean = self.samples.mean(axis=0)
        spread = sigmas * self.std()
        return mean - spread, mean + spread

    def values_on(self, grid: GridSpec) -> np.ndarray:
        if self.kind == "kernel":
            return _render_kernel(self.samples, self.bandwidth, grid)
        if self.grid.same_as(grid):
            return np.asarray(self.values)
        return self.evaluate(grid.points()).reshape(grid.nodes)

    def to_grid(self, grid: GridSpec) -> "DensityEstimate":
        return DensityEstimate.from_grid(grid, self.values_on(grid), label=self.label)

    # ---- marginals, quantiles and tails -------------------------------------

    def _marginal_cells(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        other = tuple(k for k in range(self.n) if k != j)
        cell_mass = self.values.sum(axis=other) * self.grid.cell_volume if other else self.values * self.grid.cell_volume
        return self.grid.axes[j], np.asarray(cell_mass)

    def quantile(self, alpha) -> np.ndarray:
        alpha = _alpha_vector(alpha, self.n)
        out = np.empty(self.n)
        for j in range(self.n):
            if self.kind == "kernel":
                col, h = self.samples[:, j], self.bandwidth[j]
                cdf = lambda v: float(np.mean(stats.norm.cdf((v - col) / h))) - alpha[j]
                out[j] = brentq(cdf, col.min() - 10.0 * h, col.max() + 10.0 * h, xtol=1e-12)
            else:
                mids, mass = self._marginal_cells(j)
                edges = np.concatenate([[self.grid.lower[j]], mids + 0.5 * self.grid.spacing[j]])
                cdf = np.concatenate([[0.0], np.cumsum(mass)]) / mass.sum()
                k = int(np.searchsorted(cdf, alpha[j], side="left"))
                k = min(max(k, 1), cdf.size - 1)
                w = (alpha[j] - cdf[k - 1]) / max(cdf[k] - cdf[k - 1], 1e-300)
                out[j] = edges[k - 1] + w * (edges[k] - edges[k - 1])
        return out

    def tail_mass(self, K: float) -> float:
        """Mass of {max_j |x_j| >= K}"""
        if K <= 0:
            raise DomainError("K must be positive")
        if self.kind == "kernel":
            inside = stats.norm.cdf((K - self.samples) / self.bandwidth) - stats.norm.cdf((-K - self.samples) / self.bandwidth)
            return float(max(0.0, 1.0 - np.mean(np.prod(inside, axis=1))))
        weights = []
        for j, ax in enumerate(self.grid.axes):
            half = 0.5 * self.grid.spacing[j]
            overlap = np.clip(np.minimum(ax + half, K) - np.maximum(ax - half, -K), 0.0, None)
            weights.append(overlap / self.grid.spacing[j])
        inside = self.values
        for j, w in enumerate(weights):
            shape = [1] * self.n
            shape[j] = w.size
            inside = inside * w.reshape(shape)
        inside_mass = float(inside.sum() * self.grid.cell_volume)
        return float(max(0.0, 1.0 - inside_mass / self.mass)) if self.mass > 0 else 0.0

    def floor_on_box(self, K: float, nodes: int = config.DELTA_LATTICE_NODES) -> Tuple[float, np.ndarray]:
        """Minimum over a lattice of the K-box, and where it is attained"""
        lattice = np.linspace(-K, K, nodes)
        pts = np.column_stack([m.ravel() for m in np.meshgrid(*([lattice] * self.n), indexing="ij")])
        vals = self.evaluate(pts)
        k = int(np.argmin(vals))
        return float(vals[k]), pts[k]

    def mix(self, other: "DensityEstimate", beta: float, plan: Optional[L1Plan] = None) -> "DensityEstimate":
        """beta * self + (1 - beta) * other on a common grid"""
        if not 0.0 <= beta <= 1.0:
            raise DomainError("mixture weight must lie in [0, 1]")
        grid = common_grid(self, other, plan)
        values = beta * self.values_on(grid) + (1.0 - beta) * other.values_on(grid)
        return DensityEstimate.from_grid(grid, values, label=f"mix({beta:g})")

    # ---- tabular I/O --------------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        if self.kind != "grid":
            raise DomainError("only grid densities export as tables; call to_grid first")
        pts = self.grid.points()
        frame = pd.DataFrame(pts, columns=[f"x{j + 1}" for j in range(self.n)])
        frame["value"] = np.asarray(self.values).ravel()
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, label: str = "") -> "DensityEstimate":
        coords = [c for c in frame.columns if c != "value"]
        axes = [np.unique(frame[c].to_numpy(dtype=np.float64)) for c in coords]
        spacing = np.array([ax[1] - ax[0] if ax.size > 1 else 1.0 for ax in axes])
        lower = np.array([ax[0] for ax in axes]) - 0.5 * spacing
        upper = np.array([ax[-1] for ax in axes]) + 0.5 * spacing
        grid = GridSpec(lower=lower, upper=upper, nodes=tuple(ax.size for ax in axes))
        ordered = frame.sort_values(coords)
        return cls.from_grid(grid, ordered["value"].to_numpy(dtype=np.float64), label=label)


def quantile(obj, alpha) -> np.ndarray:
    """alpha-quantile vector of an ensemble, a raw (N, n) array or a density estimate"""
    if isinstance(obj, DensityEstimate):
        return obj.quantile(alpha)
    if isinstance(obj, ParticleEnsemble):
        return empirical_quantile(obj.states, alpha)
    return empirical_quantile(obj, alpha)


def quantile_stderr(obj, alpha) -> np.ndarray:
    """Asymptotic standard error sqrt(a (1 - a) / N) / f_j(q_j), marginal f_j by KDE"""
    states = obj.states if isinstance(obj, ParticleEnsemble) else np.asarray(obj, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    N, n = states.shape
    alpha = _alpha_vector(alpha, n)
    q = empirical_quantile(states, alpha)
    h = silverman_bandwidth(states)
    f_q = np.array([np.mean(stats.norm.pdf((q[j] - states[:, j]) / h[j])) / h[j] for j in range(n)])
    return np.sqrt(alpha * (1.0 - alpha) / N) / np.maximum(f_q, 1e-300)


def kernel_stderr(u: DensityEstimate, x) -> np.ndarray:
    """Pointwise standard error of a kernel estimate, sqrt(p R / (N prod h))"""
    if u.kind != "kernel":
        raise DomainError("standard error only defined for kernel estimates")
    roughness = (2.0 * math.sqrt(math.pi)) ** (-u.n)
    p = u.evaluate(x)
    return np.sqrt(p * roughness / (u.samples.shape[0] * np.prod(u.bandwidth)))


# =============================================================================
# L1 DISTANCE
# =============================================================================

def common_grid(u1: DensityEstimate, u2: DensityEstimate, plan: Optional[L1Plan] = None) -> GridSpec:
    """Midpoint grid on the union of both evaluation boxes"""
    plan = plan or L1Plan()
    if u1.n != u2.n:
        raise DomainError(f"densities live in different dimensions ({u1.n} vs {u2.n})")
    lo1, hi1 = u1.box(plan.box_sigmas)
    lo2, hi2 = u2.box(plan.box_sigmas)
    if u1.kind == "grid" and u2.kind == "grid" and (np.any(hi1 <= lo2) or np.any(hi2 <= lo1)):
        raise DomainError("grid densities have disjoint domains")
    if u1.kind == "grid" and u2.kind == "grid" and u1.grid.same_as(u2.grid):
        return u1.grid
    return GridSpec.box(np.minimum(lo1, lo2), np.maximum(hi1, hi2), plan.nodes_for(u1.n))


def l1_distance(u1: DensityEstimate, u2: DensityEstimate, plan: Optional[L1Plan] = None) -> float:
    """
    Integral of |u1 - u2|: tensor midpoint rule for n <= 3, importance-sampled
    Monte Carlo from the half-half mixture for n >= 4
    """
    plan = plan or L1Plan()
    grid = common_grid(u1, u2, plan)
    if u1.n <= 3:
        diff = np.abs(u1.values_on(grid) - u2.values_on(grid))
        return float(diff.sum() * grid.cell_volume)

    rng = np.random.default_rng(plan.seed)
    M = plan.mc_points
    if u1.kind == "kernel" and u2.kind == "kernel":
        pick = rng.random(M) < 0.5
        pts = np.empty((M, u1.n))
        for u, mask in ((u1, pick), (u2, ~pick)):
            m = int(mask.sum())
            idx = rng.integers(0, u.samples.shape[0], m)
            pts[mask] = u.samples[idx] + u.bandwidth * rng.standard_normal((m, u.n))
        p1, p2 = u1.evaluate(pts), u2.evaluate(pts)
        proposal = 0.5 * (p1 + p2)
        ratio = np.where(proposal > 0, np.abs(p1 - p2) / np.maximum(proposal, 1e-300), 0.0)
        return float(np.mean(ratio))
    pts = rng.uniform(grid.lower, grid.upper, (M, u1.n))
    volume = float(np.prod(grid.upper - grid.lower))
    return float(np.mean(np.abs(u1.evaluate(pts) - u2.evaluate(pts))) * volume)


def tail_mass(u: DensityEstimate, K: float) -> float:
    return u.tail_mass(K)


# =============================================================================
# THE SET S
# =============================================================================

def lipschitz_constant(n: int, K: float, delta: float) -> float:
    """sqrt(n) (2K)^{-(n-1)} / delta"""
    return math.sqrt(n) * (2.0 * K) ** (-(n - 1)) / delta


def find_s_params(family: Sequence[DensityEstimate], alpha, k_grid: Optional[Sequence[float]] = None,
                  lattice_nodes: int = config.DELTA_LATTICE_NODES) -> SParams:
    """
    eps = half of min_j min(alpha_j, 1 - alpha_j); K = smallest grid value with
    family-wide tail mass <= eps and quantiles inside the box; delta = family
    floor on the K-box lattice
    """
    family = list(family)
    if not family:
        raise DomainError("find_s_params needs a non-empty family")
    n = family[0].n
    alpha = _alpha_vector(alpha, n)
    eps = config.S_EPS_FRACTION * float(np.min(np.minimum(alpha, 1.0 - alpha)))
    if k_grid is None:
        k_grid = np.arange(config.K_GRID_STEP, config.K_GRID_MAX + 0.5 * config.K_GRID_STEP, config.K_GRID_STEP)
    quantiles = [np.max(np.abs(u.quantile(alpha))) for u in family]

    saw_tail = False
    for K in k_grid:
        K = float(K)
        if max(u.tail_mass(K) for u in family) > eps or max(quantiles) > K:
            continue
        saw_tail = True
        delta = min(u.floor_on_box(K, lattice_nodes)[0] for u in family)
        if delta > 0.0:
            logger.info(f"S parameters: K={K:g}, delta={delta:.4g}, eps={eps:.4g} over {len(family)} densities")
            return SParams(K=K, delta=delta, eps=eps)
    reason = "density floor vanishes" if saw_tail else "tail mass never drops below eps"
    raise DegenerateFamilyError(f"no admissible K on the candidate grid ({reason})")


def s_membership(h: DensityEstimate, s: SParams, alpha,
                 lattice_nodes: int = config.DELTA_LATTICE_NODES) -> SMembership:
    alpha = _alpha_vector(alpha, h.n)
    tail = h.tail_mass(s.K)
    q = h.quantile(alpha)
    floor, _ = h.floor_on_box(s.K, lattice_nodes)
    return SMembership(
        tail_mass=tail, tail_margin=s.eps - tail,
        quantile=q, quantile_margin=s.K - float(np.max(np.abs(q))),
        floor=floor, floor_margin=floor - s.delta,
    )


def check_quantile_lipschitz(h1: DensityEstimate, h2: DensityEstimate, s: SParams, alpha,
                             plan: Optional[L1Plan] = None, noise: float = 0.0) -> CheckResult:
    """
    |Q(h1) - Q(h2)| <= sqrt(n) (2K)^{-(n-1)} / delta * |h1 - h2|_L1 for h1, h2 in S;
    `noise` is added to the right side as an estimator budget
    """
    for label, h in (("h1", h1), ("h2", h2)):
        member = s_membership(h, s, alpha)
        if not member.member:
            raise PreconditionError(f"{label} is not in S (margins: tail {member.tail_margin:.3g}, "
                                    f"quantile {member.quantile_margin:.3g}, floor {member.floor_margin:.3g})",
                                    predicate=member.failed_predicate)
    lhs = float(np.linalg.norm(h1.quantile(alpha) - h2.quantile(alpha)))
    dist = l1_distance(h1, h2, plan)
    const = lipschitz_constant(h1.n, s.K, s.delta)
    rhs = const * dist
    return CheckResult(
        name="quantile_lipschitz", passed=bool(lhs <= rhs + noise), lhs=lhs, rhs=rhs,
        margin=rhs + noise - lhs, details={"l1": dist, "constant": const, "noise": noise},
    )
