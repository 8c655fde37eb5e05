"""
Quantile fixed point: the map M(omega) = Q_alpha(u^omega), its Picard
iteration on [0, t0], the constants that size t0, and interval chaining up
to the horizon T.

All Picard iterations of one interval reuse one (seed, stream) pair, so the
deltas between iterates measure the map and not Monte Carlo noise.
"""
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import config
from calculations.density import (
    DensityEstimate, empirical_quantile, find_s_params, l1_distance,
    lipschitz_constant, quantile_stderr, silverman_bandwidth,
)
from calculations.particles import draw_initial, simulate_auxiliary, simulate_mckean, simulate_snapshots
from calculations.random_streams import STREAM_FORWARD, STREAM_FRESH, STREAM_PROBE
from core.errors import (
    ConfigurationError, ConstantTooLargeError, InsufficientSignalError, NonContractionError,
)
from models.model_spec import InitialDensity, L1Plan, MCConfig, ModelSpec
from models.paths import ParticleEnsemble, QuantilePath
from models.results import ContractionReport, CrossValidationReport, FixedPointReport, IntervalRecord
from utils.logger import get_logger

logger = get_logger(__name__)

Initial = Union[InitialDensity, ParticleEnsemble]

# Relative gap below which two pair distances count as the same signal
_DISTINCT_RTOL = 1e-6


class PicardRun(NamedTuple):
    path: QuantilePath
    record: IntervalRecord
    terminal: ParticleEnsemble


def _mc(mc: Optional[MCConfig]) -> MCConfig:
    return mc or MCConfig()


def _run_map(spec: ModelSpec, init: Initial, omega: QuantilePath, mc: MCConfig,
             stream: int = STREAM_FORWARD, seed: Optional[int] = None) -> ParticleEnsemble:
    """One pass of the frozen-path simulation over omega's interval, quantiles recorded"""
    start = init.t if isinstance(init, ParticleEnsemble) else omega.t_start
    return simulate_auxiliary(
        spec, omega, init, omega.t_end, mc.N, mc.dt, mc.seed if seed is None else seed,
        threads=mc.threads, stream=stream, t_start=start, record_every=mc.thin,
    )


def apply_M(spec: ModelSpec, init: Initial, omega: QuantilePath, mc: Optional[MCConfig] = None,
            stream: int = STREAM_FORWARD) -> QuantilePath:
    """Empirical alpha-quantile path of the auxiliary process driven by omega"""
    return _run_map(spec, init, omega, _mc(mc), stream).path


def contraction_rate(deltas: Sequence[float]) -> float:
    """exp of the slope of log(delta_k) against k over the positive deltas"""
    idx = [k for k, d in enumerate(deltas) if d > 0.0]
    if len(idx) < 2:
        return 0.0 if deltas and deltas[-1] == 0.0 else float("nan")
    slope = np.polyfit(np.asarray(idx, dtype=np.float64), np.log([deltas[k] for k in idx]), 1)[0]
    return float(math.exp(slope))


def _picard(spec: ModelSpec, init: Initial, t0: float, tol: float, max_iter: int, mc: MCConfig,
            omega0: Optional[QuantilePath], stream: int, interval_index: int, recheck: bool) -> PicardRun:
    if tol <= 0.0:
        raise ConfigurationError("tolerance must be positive", field="tol")
    if max_iter < 1:
        raise ConfigurationError("max_iter must be at least 1", field="max_iter")
    ens0 = draw_initial(init, spec.n, mc.N, mc.seed, stream, mc.threads)
    t_start = ens0.t
    t_end = t_start + t0
    if t_end > spec.T * (1.0 + 1e-12):
        raise ConfigurationError(f"interval end {t_end:g} exceeds T={spec.T:g}", field="t0")
    omega = omega0 if omega0 is not None else \
        QuantilePath.constant(empirical_quantile(ens0.states, spec.alpha), t_end, t_start)

    deltas: List[float] = []
    terminal = None
    converged = False
    for k in range(max_iter):
        terminal = _run_map(spec, ens0, omega, mc, stream)
        delta = terminal.path.sup_distance(omega)
        deltas.append(delta)
        omega = terminal.path
        logger.info(f"Interval {interval_index} Picard iteration {k + 1}: delta={delta:.4e}")
        if delta <= tol:
            converged = True
            break

    L_hat = contraction_rate(deltas)
    if not converged:
        if not (L_hat < 1.0) or deltas[-1] >= deltas[0]:
            raise NonContractionError(
                f"no contraction on interval {interval_index} after {max_iter} iterations",
                deltas=deltas, interval_index=interval_index,
            )
        logger.warning(f"Interval {interval_index}: {max_iter} iterations, last delta {deltas[-1]:.3e} > tol {tol:g}")

    recheck_delta = None
    if recheck:
        fresh_stream = STREAM_FRESH + interval_index
        fresh_init = init if isinstance(init, ParticleEnsemble) else \
            draw_initial(init, spec.n, mc.N, mc.seed + 1, fresh_stream, mc.threads)
        fresh = _run_map(spec, fresh_init, omega, mc, fresh_stream, seed=mc.seed + 1)
        recheck_delta = fresh.path.sup_distance(omega)
        logger.info(f"Interval {interval_index} fresh-seed re-check: delta={recheck_delta:.4e}")

    record = IntervalRecord(
        index=interval_index, t_start=t_start, t_end=t_end, iterations=len(deltas), deltas=deltas,
        L_hat=L_hat, converged=converged, recheck_delta=recheck_delta,
    )
    return PicardRun(path=omega, record=record, terminal=terminal)


def picard_solve(spec: ModelSpec, init: Initial, t0: float, tol: float = config.PICARD_TOLERANCE,
                 max_iter: int = config.PICARD_MAX_ITER, mc: Optional[MCConfig] = None,
                 omega0: Optional[QuantilePath] = None, stream: int = STREAM_FORWARD,
                 recheck: bool = True) -> Tuple[QuantilePath, FixedPointReport]:
    """
    Iterate omega <- M(omega) from the constant path at Q_alpha(f) (or omega0)
    until the sup-norm step drops to tol
    """
    run = _picard(spec, init, t0, tol, max_iter, _mc(mc), omega0, stream, 0, recheck)
    rec = run.record
    report = FixedPointReport(
        iterations=rec.iterations, deltas=rec.deltas, L_hat=rec.L_hat, t0=t0, tolerance=tol,
        converged=rec.converged, tolerance_achieved=rec.deltas[-1], recheck_delta=rec.recheck_delta,
        chained_intervals=[rec],
    )
    return run.path, report


# =============================================================================
# CONSTANTS
# =============================================================================

def choose_t0(C0: float, K: float, delta: float, n: int, target_L: float = config.TARGET_CONTRACTION,
              cap: float = math.inf, min_t0: float = 0.0) -> float:
    """
    Largest t0 with C0 sqrt(n) (2K)^{1-n} / delta * (t0 + sqrt(t0)) <= target_L, capped.
    Solved in closed form as a quadratic in sqrt(t0).
    """
    if C0 < 0 or K <= 0 or delta <= 0 or n < 1:
        raise ConfigurationError("choose_t0 needs C0 >= 0 and positive K, delta, n", field="C0")
    if not 0.0 < target_L <= 1.0:
        raise ConfigurationError("target contraction must lie in (0, 1]", field="target_L")
    A = C0 * math.sqrt(n) * (2.0 * K) ** (1 - n) / delta
    if A == 0.0:
        return cap
    root = (-1.0 + math.sqrt(1.0 + 4.0 * target_L / A)) / 2.0
    t0 = min(root * root, cap)
    if t0 <= 0.0 or t0 < min_t0:
        raise ConstantTooLargeError(
            f"C0={C0:.4g} gives t0={t0:.3g} below {min_t0:.3g}; re-estimate C0 with more particles"
        )
    return t0


def stability_rows(spec: ModelSpec, init: Initial, t_probe: Sequence[float],
               omega_pairs: Sequence[Tuple[QuantilePath, QuantilePath]], mc: MCConfig,
               plan: Optional[L1Plan], stream: int) -> List[Dict[str, float]]:
    """
    Per pair and probe time: running sup of the L1 distance between the two
    frozen-path densities, and (t + sqrt t) * sup_{s <= t} |omega1 - omega2|.
    Both sides of a pair share noise and bandwidth.
    """
    times = sorted(float(t) for t in t_probe)
    rows = []
    for i, (w1, w2) in enumerate(omega_pairs):
        snaps1 = simulate_snapshots(spec, w1, init, times, mc.N, mc.dt, mc.seed, mc.threads, stream)
        snaps2 = simulate_snapshots(spec, w2, init, times, mc.N, mc.dt, mc.seed, mc.threads, stream)
        start = w1.t_start
        running = 0.0
        for t in times:
            e1, e2 = snaps1[t], snaps2[t]
            if np.array_equal(e1.states, e2.states):
                dist = 0.0
            else:
                bw = silverman_bandwidth(e1.states)
                dist = l1_distance(DensityEstimate.from_ensemble(e1, bw), DensityEstimate.from_ensemble(e2, bw), plan)
            running = max(running, dist)
            elapsed = t - start
            gap = w1.restrict(start, t).sup_distance(w2.restrict(start, t)) if elapsed > 0 else \
                float(np.max(np.abs(w1.at(start) - w2.at(start))))
            rows.append({"pair_index": i, "t": t, "lhs": running,
                         "x": (elapsed + math.sqrt(max(elapsed, 0.0))) * gap, "gap": gap})
    return rows


def fit_C0(rows: Sequence[Dict[str, float]], safety: float = config.C0_SAFETY_FACTOR) -> float:
    """Least-squares slope through the origin of lhs against x, times the safety factor"""
    x = np.array([r["x"] for r in rows])
    y = np.array([r["lhs"] for r in rows])
    if np.all(y == 0.0):
        return 0.0
    gaps = sorted({round(r["gap"] / _DISTINCT_RTOL) for r in rows if r["gap"] > 0})
    if len(gaps) < 3 or np.sum(x * x) == 0.0:
        raise InsufficientSignalError("need at least three omega pairs with distinct sup-distances")
    return float(safety * np.sum(x * y) / np.sum(x * x))


def estimate_C0(spec: ModelSpec, init: Initial, t_probe: Sequence[float],
                omega_pairs: Sequence[Tuple[QuantilePath, QuantilePath]], mc: Optional[MCConfig] = None,
                plan: Optional[L1Plan] = None, stream: int = STREAM_PROBE) -> float:
    """Empirical constant of the L1 stability inequality, inflated by the safety factor"""
    rows = stability_rows(spec, init, t_probe, omega_pairs, _mc(mc), plan, stream)
    C0 = fit_C0(rows)
    logger.info(f"Estimated C0={C0:.4g} from {len(omega_pairs)} pairs x {len(t_probe)} times")
    return C0


def shifted_pairs(base: QuantilePath, shifts: Sequence[float]) -> List[Tuple[QuantilePath, QuantilePath]]:
    """(base, base + s * 1) for every shift s"""
    return [(base, base.shifted(np.full(base.n, float(s)))) for s in shifts]


def estimate_constants(spec: ModelSpec, init: Initial, horizon: float, mc: Optional[MCConfig] = None,
                       shifts: Sequence[float] = (0.1, 0.2, 0.4), probes: int = 3,
                       stream: int = STREAM_PROBE) -> Dict[str, float]:
    """
    C0 from constant-path pairs around Q_alpha(init), and (K, delta, eps) of S
    from the densities those pairs produce
    """
    mc = _mc(mc)
    ens0 = draw_initial(init, spec.n, mc.N, mc.seed, stream, mc.threads)
    start = ens0.t
    base = QuantilePath.constant(empirical_quantile(ens0.states, spec.alpha), start + horizon, start)
    pairs = shifted_pairs(base, shifts)
    t_probe = [start + horizon * (k + 1) / probes for k in range(probes)]
    C0 = fit_C0(stability_rows(spec, ens0, t_probe, pairs, mc, None, stream))

    family = []
    for w in (base, pairs[-1][1]):
        snaps = simulate_snapshots(spec, w, ens0, t_probe, mc.N, mc.dt, mc.seed, mc.threads, stream)
        family.extend(DensityEstimate.from_ensemble(e) for e in snaps.values())
    family.append(DensityEstimate.from_ensemble(ens0))
    s = find_s_params(family, spec.alpha)
    logger.info(f"Constants on [{start:.4g}, {start + horizon:.4g}]: C0={C0:.4g}, K={s.K:g}, delta={s.delta:.4g}")
    return {"C0": C0, "K": s.K, "delta": s.delta, "eps": s.eps}


# =============================================================================
# GLOBAL SOLUTION
# =============================================================================

def solve_global(spec: ModelSpec, init: Initial, T: Optional[float] = None,
                 tol: float = config.PICARD_TOLERANCE, mc: Optional[MCConfig] = None,
                 t0: Optional[float] = None, t0_policy: str = "fixed",
                 max_iter: int = config.PICARD_MAX_ITER, target_L: float = config.TARGET_CONTRACTION,
                 recheck: bool = True) -> Tuple[QuantilePath, FixedPointReport]:
    """
    Chain Picard solves over [0, t0], [t0, t0 + t1], ... up to T. Each interval
    starts from the previous interval's terminal particles. With t0_policy
    "auto" the interval length is re-derived from measured constants each time.
    """
    mc = _mc(mc)
    T = spec.T if T is None else T
    if T > spec.T * (1.0 + 1e-12):
        raise ConfigurationError(f"horizon {T:g} exceeds the model horizon {spec.T:g}", field="T")
    if t0_policy not in ("fixed", "auto"):
        raise ConfigurationError(f"unknown t0 policy '{t0_policy}'", field="t0_policy")
    if t0_policy == "fixed" and (t0 is None or t0 <= 0):
        raise ConfigurationError("fixed t0 policy needs a positive t0", field="t0")

    current: Initial = init
    start = init.t if isinstance(init, ParticleEnsemble) else 0.0
    path: Optional[QuantilePath] = None
    records: List[IntervalRecord] = []
    gaps: List[float] = []
    index = 0
    while start < T - 1e-12 * max(1.0, T):
        if t0_policy == "auto":
            consts = estimate_constants(spec, current, T - start, mc, stream=STREAM_PROBE + index)
            length = choose_t0(consts["C0"], consts["K"], consts["delta"], spec.n, target_L,
                               cap=T - start, min_t0=config.NEAR_INITIAL_STEPS * mc.dt)
        else:
            length = t0
        length = min(length, T - start)
        logger.info(f"Interval {index}: [{start:.4g}, {start + length:.4g}]")
        run = _picard(spec, current, length, tol, max_iter, mc, None, STREAM_FORWARD + index, index, recheck)
        if path is None:
            path = run.path
        else:
            gaps.append(float(np.max(np.abs(path.at(path.t_end) - run.path.at(run.path.t_start)))))
            path = path.concat(run.path)
        records.append(run.record)
        current = run.terminal
        start = run.record.t_end
        index += 1

    deltas = [d for rec in records for d in rec.deltas]
    rechecks = [rec.recheck_delta for rec in records if rec.recheck_delta is not None]
    report = FixedPointReport(
        iterations=sum(rec.iterations for rec in records),
        deltas=deltas,
        L_hat=max((rec.L_hat for rec in records if not math.isnan(rec.L_hat)), default=float("nan")),
        t0=records[0].t_end - records[0].t_start,
        tolerance=tol,
        converged=all(rec.converged for rec in records),
        tolerance_achieved=max(rec.deltas[-1] for rec in records),
        recheck_delta=max(rechecks) if rechecks else None,
        chained_intervals=records,
        junction_gaps=gaps,
    )
    logger.info(f"Global solve: {len(records)} intervals, {report.iterations} iterations, converged={report.converged}")
    return path, report


def _max_gap(a: QuantilePath, b: QuantilePath) -> Tuple[float, float]:
    lo, hi = max(a.t_start, b.t_start), min(a.t_end, b.t_end)
    grid = np.union1d(a.times, b.times)
    grid = np.union1d(grid[(grid >= lo) & (grid <= hi)], [lo, hi])
    diff = np.max(np.abs(a.on_grid(grid) - b.on_grid(grid)), axis=1)
    k = int(np.argmax(diff))
    return float(diff[k]), float(grid[k])


def cross_validate(spec: ModelSpec, init: Initial, T: Optional[float] = None, mc: Optional[MCConfig] = None,
                   path: Optional[QuantilePath] = None, **solve_kwargs) -> CrossValidationReport:
    """
    Sup-norm gap between the fixed-point quantile path and the quantile path of
    the self-consistent particle system, against 3 combined standard errors + dt
    """
    mc = _mc(mc)
    T = spec.T if T is None else T
    if path is None:
        path, _ = solve_global(spec, init, T, mc=mc, **solve_kwargs)
    ens, direct = simulate_mckean(spec, init, T, mc.N, mc.dt, mc.seed, mc.threads,
                                  stream=STREAM_FRESH + 1, record_every=mc.thin)
    discrepancy, argmax_time = _max_gap(path, direct)
    combined = math.sqrt(2.0) * float(np.max(quantile_stderr(ens, spec.alpha)))
    threshold = 3.0 * combined + mc.dt
    report = CrossValidationReport(
        discrepancy=discrepancy, argmax_time=argmax_time, combined_stderr=combined,
        threshold=threshold, within_tolerance=bool(discrepancy <= threshold), N=mc.N, dt=mc.dt,
    )
    logger.info(f"Cross-validation: discrepancy {discrepancy:.4g} at t={argmax_time:.4g} (threshold {threshold:.4g})")
    return report


def cross_validate_scaling(spec: ModelSpec, init: Initial, T: Optional[float] = None,
                           mc: Optional[MCConfig] = None, sizes: Sequence[int] = (),
                           **solve_kwargs) -> List[CrossValidationReport]:
    """cross_validate at several particle counts, for the 1/sqrt(N) trend"""
    mc = _mc(mc)
    sizes = sizes or (mc.N, 2 * mc.N, 4 * mc.N)
    return [cross_validate(spec, init, T, mc.with_N(N), **solve_kwargs) for N in sizes]


# =============================================================================
# CONTRACTION STUDY
# =============================================================================

def contraction_study(spec: ModelSpec, init: Initial, mc: Optional[MCConfig] = None,
                      tol: float = config.PICARD_TOLERANCE, max_iter: int = config.PICARD_MAX_ITER,
                      target_L: float = config.TARGET_CONTRACTION,
                      horizon: Optional[float] = None) -> ContractionReport:
    """Measure C0 and (K, delta), size t0 from them, and run Picard on [0, t0]"""
    mc = _mc(mc)
    horizon = spec.T if horizon is None else horizon
    consts = estimate_constants(spec, init, horizon, mc)
    t0 = choose_t0(consts["C0"], consts["K"], consts["delta"], spec.n, target_L, cap=horizon,
                   min_t0=config.NEAR_INITIAL_STEPS * mc.dt)
    _, report = picard_solve(spec, init, t0, tol, max_iter, mc)
    theoretical = consts["C0"] * lipschitz_constant(spec.n, consts["K"], consts["delta"]) * (t0 + math.sqrt(t0))
    return ContractionReport(
        C0=consts["C0"], K=consts["K"], delta=consts["delta"], eps=consts["eps"], t0=t0,
        theoretical_L=theoretical, fixed_point=report,
    )
