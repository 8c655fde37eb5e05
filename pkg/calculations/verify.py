"""
Property checks for the density estimates of the frozen-path process:
anisotropic variance scaling, two-sided Gaussian bounds, uniform tails, a
positive floor on the K-box, L1 stability in omega and the quantile-Lipschitz
inequality on S. Every check returns a report with pass/fail and margins.
"""
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.optimize import brentq

import config
from calculations.density import (
    DensityEstimate, check_quantile_lipschitz, find_s_params, kernel_stderr, quantile_stderr,
)
from calculations.fixpoint import fit_C0, stability_rows
from calculations.flow import forward_flow
from calculations.particles import Initial, simulate_auxiliary, simulate_snapshots
from calculations.random_streams import STREAM_PROBE
from core.errors import PreconditionError
from models.model_spec import L1Plan, MCConfig, ModelSpec
from models.paths import ParticleEnsemble, QuantilePath
from models.results import (
    GaussianBoundReport, LipschitzSweepReport, LowerBoundReport, ScalingReport, SParams,
    StabilityReport, StabilityRow, TailReport,
)
from utils.logger import get_logger

logger = get_logger(__name__)

# Relative tolerance of the Gaussian-oracle cross-check of the density floor
ORACLE_REL_TOL = 0.2


def _require_particles(mc: MCConfig, what: str):
    if mc.N < config.MIN_PARTICLES:
        raise PreconditionError(f"{what} needs N >= {config.MIN_PARTICLES}, got {mc.N}", predicate="min_particles")


def scale_matrix(t: float, n: int) -> np.ndarray:
    """diag(t^{1/2}, t^{3/2}, ..., t^{n - 1/2})"""
    return np.diag([t ** (i + 0.5) for i in range(n)])


def gaussian_prefactor(t: float, n: int) -> float:
    """t^{-n^2/2}, the volume factor of the two-sided bound"""
    return t ** (-(n * n) / 2.0)


# =============================================================================
# SCALING
# =============================================================================

def check_anisotropic_scaling(spec: ModelSpec, times: Sequence[float], mc: MCConfig,
                              tolerance: Optional[float] = None) -> ScalingReport:
    """
    Log-log slopes of Var(X^i_t) for the chain started at the origin; the
    expected slope of coordinate i is 2i - 1
    """
    _require_particles(mc, "anisotropic scaling")
    n = spec.n
    if n > 3:
        raise PreconditionError("scaling check supports chains of length <= 3", predicate="n<=3")
    times = sorted(float(t) for t in times)
    if len(times) < 2:
        raise PreconditionError("need at least two times for a slope", predicate="times")
    tolerance = 0.05 * n if tolerance is None else tolerance
    omega = QuantilePath.constant(np.zeros(n), times[-1])
    start = ParticleEnsemble.point(np.zeros(n), mc.N)
    snaps = simulate_snapshots(spec, omega, start, times, mc.N, mc.dt, mc.seed, mc.threads)
    variances = np.array([snaps[t].variance() for t in times])
    slopes = [float(np.polyfit(np.log(times), np.log(variances[:, j]), 1)[0]) for j in range(n)]
    expected = [2.0 * j + 1.0 for j in range(n)]
    passed = all(abs(s - e) <= tolerance for s, e in zip(slopes, expected))
    logger.info(f"Scaling slopes {np.round(slopes, 4).tolist()} vs {expected} (tol {tolerance:g})")
    return ScalingReport(
        n=n, times=times, variances=variances.tolist(), slopes=slopes, expected=expected,
        tolerance=tolerance, passed=passed,
    )


# =============================================================================
# TWO-SIDED GAUSSIAN BOUNDS
# =============================================================================

def _fit_point(log_g: float, z2: float, c_max: float) -> Tuple[Optional[float], float, float]:
    """
    Smallest C >= 1 with exp(-C z2) / C <= g <= C exp(-z2 / C), per side.
    Returns (C or None if unfittable, C for the lower side, C for the upper side).
    """
    lower = lambda C: log_g + C * z2 + math.log(C)
    upper = lambda C: math.log(C) - z2 / C - log_g

    def side(func) -> Optional[float]:
        if func(1.0) >= 0.0:
            return 1.0
        if func(c_max) < 0.0:
            return None
        return brentq(func, 1.0, c_max, xtol=1e-10)

    c_low, c_up = side(lower), side(upper)
    if c_low is None or c_up is None:
        return None, c_low or c_max, c_up or c_max
    return max(c_low, c_up), c_low, c_up


def check_gaussian_bounds(spec: ModelSpec, omega: QuantilePath, t: float, probe_points, mc: MCConfig,
                          x0=None, exact_pdf: Optional[Callable] = None,
                          mask_sigmas: float = config.KDE_MASK_SIGMAS) -> GaussianBoundReport:
    """
    Fit the smallest C >= 1 with
        t^{-n^2/2} exp(-C |T_t^{-1}(theta - y)|^2) / C <= p(t, y) <= C t^{-n^2/2} exp(-|T_t^{-1}(theta - y)|^2 / C)
    over the probe points, p the density of the process started at x0 and theta
    the characteristic flow from x0. Points beyond mask_sigmas scaled units are
    skipped; points no C in [1, GAUSSIAN_C_MAX] can fit are reported.
    """
    n = spec.n
    x0 = np.zeros(n) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    theta = forward_flow(spec, omega, x0, t).theta
    z = (theta[None, :] - ys) @ np.linalg.inv(scale_matrix(t, n)).T
    z_norm = np.linalg.norm(z, axis=1)
    keep = z_norm <= mask_sigmas

    if exact_pdf is not None:
        values = np.asarray(exact_pdf(ys), dtype=np.float64).reshape(-1)
    else:
        _require_particles(mc, "Gaussian bounds")
        start = ParticleEnsemble.point(x0, mc.N, t=omega.t_start)
        ens = simulate_auxiliary(spec, omega, start, omega.t_start + t, mc.N, mc.dt, mc.seed, mc.threads)
        values = DensityEstimate.from_ensemble(ens).evaluate(ys)

    log_pref = math.log(gaussian_prefactor(t, n))
    C, C_lower, C_upper = 1.0, 1.0, 1.0
    unfittable, margins = [], []
    for k in np.flatnonzero(keep):
        point = {"y": ys[k].tolist(), "z": float(z_norm[k]), "value": float(values[k])}
        if values[k] <= 0.0:
            unfittable.append({**point, "reason": "non-positive density"})
            continue
        c_k, c_low, c_up = _fit_point(math.log(values[k]) - log_pref, float(z_norm[k] ** 2), config.GAUSSIAN_C_MAX)
        if c_k is None:
            unfittable.append({**point, "reason": "no C in range"})
            continue
        C, C_lower, C_upper = max(C, c_k), max(C_lower, c_low), max(C_upper, c_up)
        margins.append({"index": int(k), "z": float(z_norm[k]), "value": float(values[k]), "C": float(c_k)})

    n_masked = int(np.count_nonzero(~keep))
    passed = not unfittable and len(margins) > 0
    logger.info(f"Gaussian bounds at t={t:g}: C={C:.4g} over {len(margins)} points "
                f"({n_masked} masked, {len(unfittable)} unfittable)")
    return GaussianBoundReport(
        t=t, C=C, C_lower=C_lower, C_upper=C_upper, n_points=int(ys.shape[0]), n_masked=n_masked,
        unfittable=unfittable, margins=margins, passed=passed,
    )


# =============================================================================
# TAILS AND FLOOR
# =============================================================================

def _family_densities(spec: ModelSpec, init: Initial, omegas: Sequence[QuantilePath],
                      times: Sequence[float], mc: MCConfig) -> List[Tuple[int, float, DensityEstimate]]:
    out = []
    for i, omega in enumerate(omegas):
        snaps = simulate_snapshots(spec, omega, init, times, mc.N, mc.dt, mc.seed, mc.threads, STREAM_PROBE)
        out.extend((i, t, DensityEstimate.from_ensemble(e)) for t, e in snaps.items())
    return out


def _check_family(omegas: Sequence[QuantilePath], what: str):
    if len(omegas) < 3:
        raise PreconditionError(f"{what} needs a family of at least 3 paths", predicate="family_size")


def check_tail_uniformity(spec: ModelSpec, init: Initial, omegas: Sequence[QuantilePath],
                          times: Sequence[float], eps: float, mc: MCConfig,
                          k_grid: Optional[Sequence[float]] = None) -> TailReport:
    """One K with tail mass <= eps for every (omega, t) in the grid"""
    _require_particles(mc, "tail uniformity")
    _check_family(omegas, "tail uniformity")
    if k_grid is None:
        k_grid = np.arange(config.K_GRID_STEP, config.K_GRID_MAX + 0.5 * config.K_GRID_STEP, config.K_GRID_STEP)
    family = _family_densities(spec, init, omegas, times, mc)
    chosen = None
    for K in k_grid:
        if max(u.tail_mass(float(K)) for _, _, u in family) <= eps:
            chosen = float(K)
            break
    K = chosen if chosen is not None else float(k_grid[-1])
    table = [{"omega_index": i, "t": t, "tail_mass": u.tail_mass(K)} for i, t, u in family]
    max_tail = max(row["tail_mass"] for row in table)
    logger.info(f"Tail uniformity: K={K:g}, max tail mass {max_tail:.4g} (eps {eps:g})")
    return TailReport(K=K, eps=eps, max_tail_mass=max_tail, table=table, passed=chosen is not None)


def check_lower_bound(spec: ModelSpec, init: Initial, omegas: Sequence[QuantilePath], times: Sequence[float],
                      K: float, mc: MCConfig, oracle: Optional[Callable] = None,
                      lattice_nodes: int = config.DELTA_LATTICE_NODES) -> LowerBoundReport:
    """
    delta = min over the family of the density on the K-box lattice, required
    to exceed two estimator standard errors; oracle(t, points) -> exact density
    values adds a relative cross-check of delta
    """
    _require_particles(mc, "lower bound")
    _check_family(omegas, "lower bound")
    family = _family_densities(spec, init, omegas, times, mc)
    delta, argmin, stderr = math.inf, {}, 0.0
    for i, t, u in family:
        floor, where = u.floor_on_box(K, lattice_nodes)
        if floor < delta:
            delta = floor
            stderr = float(kernel_stderr(u, where)[0])
            argmin = {"omega_index": i, "t": t, "x": where.tolist()}

    oracle_delta = relative_error = None
    passed = delta > 2.0 * stderr
    if oracle is not None:
        lattice = np.linspace(-K, K, lattice_nodes)
        pts = np.column_stack([m.ravel() for m in np.meshgrid(*([lattice] * spec.n), indexing="ij")])
        oracle_delta = float(min(np.min(oracle(t, pts)) for t in times))
        relative_error = abs(delta - oracle_delta) / oracle_delta
        passed = passed and relative_error <= ORACLE_REL_TOL
    logger.info(f"Lower bound on the K={K:g} box: delta={delta:.4g} (SE {stderr:.2g})")
    return LowerBoundReport(
        K=K, delta=delta, stderr=stderr, argmin=argmin, oracle_delta=oracle_delta,
        relative_error=relative_error, passed=passed,
    )


# =============================================================================
# STABILITY IN OMEGA
# =============================================================================

def check_stability(spec: ModelSpec, init: Initial, fit_pairs: Sequence[Tuple[QuantilePath, QuantilePath]],
                    holdout_pairs: Sequence[Tuple[QuantilePath, QuantilePath]], t_probe: Sequence[float],
                    mc: MCConfig, plan: Optional[L1Plan] = None) -> StabilityReport:
    """
    Fit C0 on one set of omega pairs and require
        sup_{s<=t} |u^1_s - u^2_s|_L1 <= C0 (t + sqrt t) sup_{s<=t} |omega^1 - omega^2|
    on a disjoint held-out set
    """
    _require_particles(mc, "stability")
    if len(holdout_pairs) < 5:
        raise PreconditionError("stability needs at least 5 held-out pairs", predicate="holdout_size")
    if len(fit_pairs) < 3:
        raise PreconditionError("stability needs at least 3 fitting pairs", predicate="fit_size")
    C0 = fit_C0(stability_rows(spec, init, t_probe, fit_pairs, mc, plan, STREAM_PROBE))
    rows = []
    for r in stability_rows(spec, init, t_probe, holdout_pairs, mc, plan, STREAM_PROBE):
        rhs = C0 * r["x"]
        rows.append(StabilityRow(pair_index=int(r["pair_index"]), t=r["t"], lhs=r["lhs"], rhs=rhs,
                                 passed=bool(r["lhs"] <= rhs)))
    passed = all(row.passed for row in rows)
    logger.info(f"Stability: C0={C0:.4g}, {sum(r.passed for r in rows)}/{len(rows)} held-out rows pass")
    return StabilityReport(C0=C0, n_pairs=len(holdout_pairs), rows=rows, passed=passed)


# =============================================================================
# QUANTILE-LIPSCHITZ ON S
# =============================================================================

def random_gaussian_pairs(n: int, count: int, seed: int = 0, nodes: Optional[int] = None,
                          shift: float = 0.5, scale: Tuple[float, float] = (0.8, 1.2),
                          half_width: float = 8.0) -> List[Tuple[DensityEstimate, DensityEstimate]]:
    """Random pairs from the product-Gaussian location/scale family, on one shared grid"""
    rng = np.random.default_rng(seed)
    nodes = nodes or L1Plan().nodes_for(n)
    lower, upper = -half_width * np.ones(n), half_width * np.ones(n)

    def draw() -> DensityEstimate:
        mean = rng.uniform(-shift, shift, n)
        sd = rng.uniform(scale[0], scale[1], n)
        pdf = lambda x: np.prod(stats.norm.pdf(x, loc=mean, scale=sd), axis=1)
        return DensityEstimate.from_pdf(pdf, lower, upper, nodes)

    return [(draw(), draw()) for _ in range(count)]


def _quantile_noise(h1: DensityEstimate, h2: DensityEstimate, alpha, sigmas: float) -> float:
    if h1.kind != "kernel" or h2.kind != "kernel":
        return 0.0
    se = np.hypot(quantile_stderr(h1.samples, alpha), quantile_stderr(h2.samples, alpha))
    return float(sigmas * np.linalg.norm(se))


def check_quantile_lipschitz_sweep(pairs: Sequence[Tuple[DensityEstimate, DensityEstimate]], alpha,
                                   s: Optional[SParams] = None, plan: Optional[L1Plan] = None,
                                   noise_sigmas: float = 3.0) -> LipschitzSweepReport:
    """
    The quantile-Lipschitz inequality on every pair, with S sized from the
    whole family when s is not given
    """
    if s is None:
        s = find_s_params([h for pair in pairs for h in pair], alpha)
    violations, worst = 0, math.inf
    for h1, h2 in pairs:
        result = check_quantile_lipschitz(h1, h2, s, alpha, plan, noise=_quantile_noise(h1, h2, alpha, noise_sigmas))
        worst = min(worst, result.margin)
        violations += int(not result.passed)
    logger.info(f"Quantile-Lipschitz sweep: {violations} violations over {len(pairs)} pairs")
    return LipschitzSweepReport(n_cases=len(pairs), violations=violations, worst_margin=worst,
                                passed=violations == 0)
