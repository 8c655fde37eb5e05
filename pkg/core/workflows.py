"""
Command workflows shared by main.py and scripts

Each cmd_* takes a prepared RunContext, writes its artifacts and returns an
exit status. run_command wraps preparation and maps errors to exit codes:

    0  success
    1  a verification check failed
    2  configuration error
    3  non-contraction, hypothesis or integrability violation, t0 not reachable
    4  simulation blow-up or flow integration failure
"""
import math
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from calculations.coefficients import validate_hypotheses
from calculations.density import DensityEstimate, GridSpec, empirical_quantile, kernel_stderr, quantile_stderr
from calculations.feynman_kac import evaluate_u, evaluate_u_batch
from calculations.fixpoint import contraction_study, cross_validate, shifted_pairs, solve_global
from calculations.flow import check_flow_bounds, forward_flow
from calculations.particles import draw_initial, simulate_auxiliary, simulate_mckean, simulate_snapshots
from calculations.verify import (
    check_anisotropic_scaling, check_gaussian_bounds, check_lower_bound, check_quantile_lipschitz_sweep,
    check_stability, check_tail_uniformity, random_gaussian_pairs, scale_matrix,
)
from core.errors import (
    ConfigurationError, DegenerateFamilyError, DomainError, InsufficientSignalError,
    IntegrationFailureError, PreconditionError, SimulationBlowUpError, SolverError,
)
from database.artifact_store import ArtifactStore
from families.builtin import kolmogorov_density
from families.config_parser import build_initial, build_model, load_run_config, mc_config
from models.model_spec import InitialDensity, L1Plan, MCConfig, ModelSpec, OdeConfig
from models.paths import ParticleEnsemble, QuantilePath
from models.run_config import KNOWN_CHECKS, RunConfig
from utils.logger import get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_BLOWUP = 4

# Hypotheses that block a solve; H1 only warns (quantile-coupled drifts grow with y)
PREFLIGHT_CHECKS = ("H2", "H3", "H4", "H5", "chain", "c_bound")

# Errors that turn a single verification check into a failed check
CHECK_FAILURES = (PreconditionError, InsufficientSignalError, DegenerateFamilyError, DomainError)

# FK vs KDE agreement, in combined standard errors
FK_KDE_SIGMAS = 3.0


def fk_kde_margin(fk_value: float, fk_stderr: float, kde_value: float, kde_stderr: float) -> float:
    """Budget minus discrepancy; negative means FK and the KDE disagree"""
    return FK_KDE_SIGMAS * math.hypot(fk_stderr, kde_stderr) - abs(fk_value - kde_value)


class RunContext(NamedTuple):
    cfg: RunConfig
    spec: ModelSpec
    init: Union[InitialDensity, ParticleEnsemble]
    mc: MCConfig
    store: ArtifactStore


class CheckOutcome(NamedTuple):
    passed: bool
    record: Dict
    rows: Optional[List[Dict]] = None


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, (SimulationBlowUpError, IntegrationFailureError)):
        return EXIT_BLOWUP
    return EXIT_SOLVER


def prepare(config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
            threads: Optional[int] = None) -> RunContext:
    overrides = {"mc": {"seed": seed, "threads": threads}, "output": {"dir": out}}
    cfg, digest = load_run_config(config_path, overrides)
    spec = build_model(cfg.model)
    mc = mc_config(cfg)
    init = build_initial(cfg.model, mc)
    store = ArtifactStore(cfg.output.dir, config_hash=digest, seed=mc.seed)
    return RunContext(cfg=cfg, spec=spec, init=init, mc=mc, store=store)


def run_command(command: str, config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
                threads: Optional[int] = None, checks: Optional[Sequence[str]] = None) -> int:
    """Prepare the run, dispatch to the command and map failures to exit codes"""
    try:
        ctx = prepare(config_path, out, seed, threads)
        if command == "solve":
            return cmd_solve(ctx)
        if command == "simulate":
            return cmd_simulate(ctx)
        if command == "verify":
            return cmd_verify(ctx, checks)
        if command == "contraction":
            return cmd_contraction(ctx)
        raise ConfigurationError(f"unknown command '{command}'", field="command")
    except ValidationError as exc:
        logger.error(f"{command}: invalid input: {exc.errors()[0]['msg']}")
        return EXIT_CONFIG
    except SolverError as exc:
        code = exit_code_for(exc)
        logger.error(f"{command} failed (exit {code}): {exc}")
        return code


def _base_path(ctx: RunContext) -> QuantilePath:
    """Constant path at the alpha-quantile of the initial law over [0, T]"""
    ens0 = draw_initial(ctx.init, ctx.spec.n, ctx.mc.N, ctx.mc.seed, threads=ctx.mc.threads)
    return QuantilePath.constant(empirical_quantile(ens0.states, ctx.spec.alpha), ctx.spec.T)


def _exact_coupling(ctx: RunContext) -> Optional[float]:
    """Chain coupling when the law of X_t is the closed-form Gaussian, else None"""
    m = ctx.cfg.model
    if m.sigma0 != 1.0 or m.sigma_amplitude != 0.0 or m.drift_amplitude != 0.0:
        return None
    if m.family == "kolmogorov":
        return m.coupling
    if m.family == "zero_drift" and m.n == 1:
        return 0.0
    return None


# =============================================================================
# SOLVE / SIMULATE / CONTRACTION
# =============================================================================

def preflight(ctx: RunContext) -> bool:
    """Probe the hypotheses; only the blocking subset can fail the run"""
    report = validate_hypotheses(ctx.spec)
    ctx.store.write_report("hypotheses.txt", report.to_record(), header="hypotheses")
    blocking = [c for c in report.failed() if c.name in PREFLIGHT_CHECKS]
    for check in report.failed():
        level = logger.error if check in blocking else logger.warning
        level(f"Hypothesis {check.name} ({check.description}) violated: "
              f"worst {check.worst_value:.4g} vs bound {check.bound:.4g} at {check.witness}")
    return not blocking


def _snapshot_grids(ctx: RunContext, path: QuantilePath):
    times = [t for t in ctx.cfg.solver.snapshot_times if 0.0 < t <= ctx.spec.T]
    if not times:
        return
    if ctx.spec.n > 3:
        logger.warning("density grid snapshots are written for n <= 3 only")
        return
    snaps = simulate_snapshots(ctx.spec, path, ctx.init, times, ctx.mc.N, ctx.mc.dt, ctx.mc.seed, ctx.mc.threads)
    nodes = L1Plan().nodes_for(ctx.spec.n)
    for t, ens in snaps.items():
        u = DensityEstimate.from_ensemble(ens)
        lower, upper = u.box()
        ctx.store.save_density_grid(f"density_t{t:g}.csv", u.to_grid(GridSpec.box(lower, upper, nodes)))


def cmd_solve(ctx: RunContext) -> int:
    """Fixed-point solve over [0, T], cross-validated against the particle system"""
    if not preflight(ctx):
        return EXIT_SOLVER
    s = ctx.cfg.solver
    path, report = solve_global(ctx.spec, ctx.init, ctx.spec.T, s.tol, ctx.mc, t0=s.t0,
                                t0_policy=s.t0_policy, max_iter=s.max_iter, target_L=s.target_L)
    ctx.store.save_quantile_path("quantile_path.csv", path)
    ctx.store.write_report("solve_report.txt", report.to_record(), header="solve")
    _snapshot_grids(ctx, path)
    if s.cross_validate:
        xv = cross_validate(ctx.spec, ctx.init, ctx.spec.T, ctx.mc, path=path)
        ctx.store.write_report("cross_validation.txt", xv.to_record(), header="cross_validate")
    if not report.converged:
        logger.error(f"Fixed point not reached: worst final delta {report.tolerance_achieved:.3g} > {s.tol:g}")
        return EXIT_SOLVER
    return EXIT_OK


def cmd_simulate(ctx: RunContext) -> int:
    """Direct simulation of the self-consistent particle system"""
    ens, path = simulate_mckean(ctx.spec, ctx.init, ctx.spec.T, ctx.mc.N, ctx.mc.dt, ctx.mc.seed,
                                ctx.mc.threads, record_every=ctx.mc.thin)
    ctx.store.save_ensemble_csv("ensemble.csv", ens)
    if ctx.cfg.output.binary_ensemble:
        ctx.store.save_ensemble_binary("ensemble.bin", ens)
    ctx.store.save_quantile_path("mckean_quantile_path.csv", path)
    q = empirical_quantile(ens.states, ctx.spec.alpha)
    ctx.store.write_report("simulate_report.txt", {
        "N": ens.N, "n": ens.n, "T": ctx.spec.T, "dt": ctx.mc.dt,
        "terminal_quantile": q, "quantile_stderr": quantile_stderr(ens, ctx.spec.alpha),
        "mean": ens.mean(), "variance": ens.variance(),
    }, header="simulate")
    return EXIT_OK


def cmd_contraction(ctx: RunContext) -> int:
    """Measure C0, (K, delta), size t0 and run the Picard iteration on [0, t0]"""
    s = ctx.cfg.solver
    report = contraction_study(ctx.spec, ctx.init, ctx.mc, s.tol, s.max_iter, s.target_L)
    ctx.store.write_report("contraction_report.txt", report.to_record(), header="contraction")
    deltas = report.fixed_point.deltas
    ctx.store.save_series("contraction_deltas.csv", {"iteration": list(range(1, len(deltas) + 1)), "delta": deltas})
    fp = report.fixed_point
    if not fp.converged or not fp.L_hat < 1.0:
        return EXIT_SOLVER
    return EXIT_OK


# =============================================================================
# VERIFY
# =============================================================================

def _check_hypotheses(ctx: RunContext) -> CheckOutcome:
    report = validate_hypotheses(ctx.spec)
    rows = [{"name": c.name, "passed": c.passed, "worst_value": c.worst_value, "bound": c.bound}
            for c in report.checks]
    return CheckOutcome(report.all_passed, report.to_record(), rows)


def _check_flow_bounds(ctx: RunContext) -> CheckOutcome:
    omega = _base_path(ctx)
    report = check_flow_bounds(ctx.spec, omega)
    # plot data: the characteristic from the origin over [0, T]
    trajectory = forward_flow(ctx.spec, omega, np.zeros(ctx.spec.n), ctx.spec.T, cfg=OdeConfig(record_path=True))
    ctx.store.save_flow("flow_trajectory.csv", trajectory)
    passed = report.passed and report.identity_error <= 1e-8
    return CheckOutcome(passed, report.to_record())


def _check_scaling(ctx: RunContext) -> CheckOutcome:
    times = [t for t in ctx.cfg.verify.times if t <= ctx.spec.T]
    report = check_anisotropic_scaling(ctx.spec, times, ctx.mc)
    rows = [{"coordinate": j + 1, "slope": s, "expected": e}
            for j, (s, e) in enumerate(zip(report.slopes, report.expected))]
    return CheckOutcome(report.passed, report.to_record(), rows)


def _check_gaussian_bounds(ctx: RunContext) -> CheckOutcome:
    n, t = ctx.spec.n, ctx.cfg.verify.t
    omega = _base_path(ctx)
    rng = np.random.default_rng(ctx.mc.seed)
    z = rng.uniform(-3.0, 3.0, (ctx.cfg.verify.probe_points, n))
    x0 = np.zeros(n)
    theta = forward_flow(ctx.spec, omega, x0, t).theta
    points = theta[None, :] + z @ scale_matrix(t, n).T
    exact = None
    coupling = _exact_coupling(ctx)
    if coupling is not None:
        law = kolmogorov_density(t, n, 0.0, x0, coupling)
        exact = lambda y: np.atleast_1d(law.pdf(y))
    report = check_gaussian_bounds(ctx.spec, omega, t, points, ctx.mc, x0=x0, exact_pdf=exact)
    return CheckOutcome(report.passed, report.to_record(), report.margins)


def _omega_family(ctx: RunContext) -> List[QuantilePath]:
    base = _base_path(ctx)
    return [base, base.shifted(np.full(ctx.spec.n, 0.5)), base.shifted(np.full(ctx.spec.n, -0.5))]


def _family_times(ctx: RunContext) -> List[float]:
    times = [t for t in ctx.cfg.verify.times if t <= ctx.spec.T]
    return sorted({times[0], times[len(times) // 2], times[-1]})


def _check_tail(ctx: RunContext) -> CheckOutcome:
    report = check_tail_uniformity(ctx.spec, ctx.init, _omega_family(ctx), _family_times(ctx),
                                   ctx.cfg.verify.eps, ctx.mc)
    return CheckOutcome(report.passed, report.to_record(), report.table)


def _check_lower_bound(ctx: RunContext) -> CheckOutcome:
    omegas, times = _omega_family(ctx), _family_times(ctx)
    tail = check_tail_uniformity(ctx.spec, ctx.init, omegas, times, ctx.cfg.verify.eps, ctx.mc)
    oracle = None
    m = ctx.cfg.model
    coupling = _exact_coupling(ctx)
    if coupling is not None and m.init == "gaussian":
        oracle = lambda t, pts: np.atleast_1d(
            kolmogorov_density(t, m.n, m.init_var, m.init_mean, coupling).pdf(pts))
    report = check_lower_bound(ctx.spec, ctx.init, omegas, times, tail.K, ctx.mc, oracle=oracle)
    return CheckOutcome(report.passed, report.to_record())


def _check_stability(ctx: RunContext) -> CheckOutcome:
    base = _base_path(ctx)
    k = ctx.cfg.verify.pairs
    fit = shifted_pairs(base, np.linspace(0.05, 0.5, k))
    holdout = shifted_pairs(base, np.linspace(0.075, 0.525, k))
    report = check_stability(ctx.spec, ctx.init, fit, holdout, _family_times(ctx), ctx.mc)
    return CheckOutcome(report.passed, report.to_record(), [r.to_record() for r in report.rows])


def _check_lipschitz(ctx: RunContext) -> CheckOutcome:
    if ctx.spec.n > 3:
        raise PreconditionError("grid density pairs are built for n <= 3", predicate="n<=3")
    pairs = random_gaussian_pairs(ctx.spec.n, ctx.cfg.verify.lipschitz_pairs, seed=ctx.mc.seed % (2**32))
    report = check_quantile_lipschitz_sweep(pairs, ctx.spec.alpha)
    return CheckOutcome(report.passed, report.to_record())


def _check_fk(ctx: RunContext) -> CheckOutcome:
    """FK batch on fk_points if given, otherwise FK against the forward KDE"""
    if not isinstance(ctx.init, InitialDensity):
        raise PreconditionError("Feynman-Kac needs an initial density, not an ensemble", predicate="init_density")
    v, spec, mc = ctx.cfg.verify, ctx.spec, ctx.mc
    omega = _base_path(ctx)
    if v.fk_points:
        points = ArtifactStore.read_csv(v.fk_points)
        table = evaluate_u_batch(spec, omega, ctx.init, points, v.fk_N, mc.dt, mc.seed, mc.threads)
        passed = bool(np.all(table["value"] >= -3.0 * table["stderr"]))
        ctx.store.write_csv("fk_values.csv", table)
        return CheckOutcome(passed, {"points": len(table), "min_value": float(table["value"].min())})

    t = v.t
    ens = simulate_auxiliary(spec, omega, ctx.init, t, mc.N, mc.dt, mc.seed, mc.threads)
    kde = DensityEstimate.from_ensemble(ens)
    sd = np.sqrt(ens.variance())
    offsets = np.linspace(-1.0, 1.0, 5)
    points = ens.mean()[None, :] + offsets[:, None] * sd[None, :]
    rows = []
    for x in points:
        fk = evaluate_u(spec, omega, ctx.init, t, x, v.fk_N, mc.dt, mc.seed, mc.threads)
        kde_value = float(kde.evaluate(x)[0])
        kde_se = float(kernel_stderr(kde, x)[0])
        rows.append({"x": x.tolist(), "fk": fk.value, "fk_stderr": fk.stderr, "kde": kde_value,
                     "kde_stderr": kde_se, "margin": fk_kde_margin(fk.value, fk.stderr, kde_value, kde_se)})
    passed = all(r["margin"] >= 0.0 for r in rows)
    return CheckOutcome(passed, {"t": t, "points": len(rows), "worst_margin": min(r["margin"] for r in rows)}, rows)


CHECKS: Dict[str, Callable[[RunContext], CheckOutcome]] = {
    "hypotheses": _check_hypotheses,
    "flow_bounds": _check_flow_bounds,
    "scaling": _check_scaling,
    "gaussian_bounds": _check_gaussian_bounds,
    "tail": _check_tail,
    "lower_bound": _check_lower_bound,
    "stability": _check_stability,
    "lipschitz": _check_lipschitz,
    "fk": _check_fk,
}


def cmd_verify(ctx: RunContext, checks: Optional[Sequence[str]] = None) -> int:
    """Run the selected checks; every check writes its report, pass or fail"""
    names = list(checks) if checks else list(ctx.cfg.verify.checks)
    unknown = [c for c in names if c not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown checks {unknown}; known: {', '.join(KNOWN_CHECKS)}", field="check")

    failed = []
    for name in names:
        logger.info(f"Verify: {name}")
        try:
            outcome = CHECKS[name](ctx)
        except CHECK_FAILURES as exc:
            outcome = CheckOutcome(False, {"error": type(exc).__name__, "message": str(exc)})
        record = {"check": name, "passed": outcome.passed, **outcome.record}
        ctx.store.write_report(f"verify_{name}.txt", record, header=f"verify {name}")
        if outcome.rows:
            ctx.store.write_rows(f"verify_{name}.csv", outcome.rows)
        if not outcome.passed:
            failed.append(name)
        logger.info(f"Verify {name}: {'pass' if outcome.passed else 'FAIL'}")

    if failed:
        logger.warning(f"Failed checks: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    return EXIT_OK
