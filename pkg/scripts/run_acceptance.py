#!/usr/bin/env python3
"""
Full-scale acceptance run

Runs every acceptance item at the particle counts it is stated for and
writes one key-value summary to output/acceptance/acceptance.txt. Each item
takes minutes, not seconds; the unit tests cover the same properties at desk
scale.

    python scripts/run_acceptance.py [--only scaling,oracle,...] [--threads K]
"""
import argparse
import math
import sys
import time
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np

import config
from calculations.density import DensityEstimate, kernel_stderr
from calculations.feynman_kac import density_terms, evaluate_u, gradient_terms
from calculations.fixpoint import contraction_study, cross_validate_scaling, shifted_pairs
from calculations.flow import check_flow_bounds
from calculations.particles import simulate_auxiliary, simulate_backward_fk, simulate_mckean
from calculations.verify import (
    check_anisotropic_scaling, check_lower_bound, check_quantile_lipschitz_sweep, check_stability,
    check_tail_uniformity, random_gaussian_pairs,
)
from core.workflows import fk_kde_margin
from database.artifact_store import ArtifactStore
from families.builtin import gaussian_density, kolmogorov, kolmogorov_density, mean_reverting
from models.model_spec import FlowProbe, MCConfig
from models.paths import QuantilePath
from utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

FULL_N = 100_000
FINE_DT = 1e-3
FK_TIME = 0.5


def _grid_points(n: int, count: int, half_width: float) -> np.ndarray:
    """count points on the diagonal segment [-half_width, half_width] * (1, ..., 1)"""
    return np.outer(np.linspace(-half_width, half_width, count), np.ones(n))


def item_scaling(threads: int) -> dict:
    times = [0.1 * k for k in range(1, 11)]
    out = {}
    for n in (1, 2, 3):
        mc = MCConfig(N=FULL_N, dt=FINE_DT, seed=101 + n, threads=threads)
        report = check_anisotropic_scaling(kolmogorov(n), times, mc, tolerance=0.05 * n)
        out[f"n{n}"] = {"slopes": report.slopes, "passed": report.passed}
    out["passed"] = all(v["passed"] for v in out.values())
    return out


def item_oracle(threads: int) -> dict:
    spec = kolmogorov(2)
    init = gaussian_density([0.0, 0.0], [0.1, 0.1])
    omega = QuantilePath.constant([0.0, 0.0], spec.T)
    exact = kolmogorov_density(FK_TIME, 2, 0.1)
    rows = []
    for x in _grid_points(2, 5, 0.5):
        est = evaluate_u(spec, omega, init, FK_TIME, x, FULL_N, FINE_DT, seed=7, threads=threads)
        target = float(exact.pdf(x))
        rows.append({"x": x.tolist(), "fk": est.value, "exact": target,
                     "z": abs(est.value - target) / est.stderr})
    return {"rows": rows, "passed": all(r["z"] <= 3.0 for r in rows)}


def item_fk_vs_kde(threads: int) -> dict:
    spec = kolmogorov(2)
    init = gaussian_density([0.0, 0.0], [0.1, 0.1])
    omega = QuantilePath.constant([0.0, 0.0], spec.T)
    ens = simulate_auxiliary(spec, omega, init, FK_TIME, FULL_N, FINE_DT, seed=8, threads=threads)
    kde = DensityEstimate.from_ensemble(ens)
    worst = math.inf
    for x in _grid_points(2, 20, 0.6):
        fk = evaluate_u(spec, omega, init, FK_TIME, x, FULL_N, FINE_DT, seed=9, threads=threads)
        kde_value = float(kde.evaluate(x)[0])
        kde_se = float(kernel_stderr(kde, x)[0])
        worst = min(worst, fk_kde_margin(fk.value, fk.stderr, kde_value, kde_se))
    return {"worst_margin": worst, "passed": worst >= 0.0}


def item_gradient(threads: int) -> dict:
    """evaluate_grad_u terms against central differences on the same paths"""
    spec = kolmogorov(2)
    init = gaussian_density([0.0, 0.0], [0.1, 0.1])
    omega = QuantilePath.constant([0.0, 0.0], spec.T)
    rng = np.random.default_rng(3)
    h = 1e-4
    worst = 0.0
    for x in rng.uniform(-0.5, 0.5, (10, 2)):
        samples = simulate_backward_fk(spec, omega, FK_TIME, x, FULL_N, FINE_DT, 11, threads,
                                       with_jacobian=True, with_c_gradient=True)
        grad = gradient_terms(init, samples)
        for j in range(2):
            step = np.zeros(2)
            step[j] = h
            plus = density_terms(init, simulate_backward_fk(spec, omega, FK_TIME, x + step, FULL_N, FINE_DT, 11, threads))
            minus = density_terms(init, simulate_backward_fk(spec, omega, FK_TIME, x - step, FULL_N, FINE_DT, 11, threads))
            diff = grad[:, j] - (plus - minus) / (2.0 * h)
            # shared paths: the gap is truncation error, measured in standard errors of the estimate
            z = abs(diff.mean()) / (grad[:, j].std(ddof=1) / math.sqrt(FULL_N))
            worst = max(worst, z)
    return {"worst_z": worst, "passed": worst <= 3.0}


def item_lipschitz(threads: int) -> dict:
    out = {}
    for n in (1, 2):
        report = check_quantile_lipschitz_sweep(random_gaussian_pairs(n, 100, seed=n), np.full(n, 0.5))
        out[f"n{n}"] = {"violations": report.violations, "worst_margin": report.worst_margin}
    out["passed"] = all(v["violations"] == 0 for v in out.values())
    return out


def item_flow_bounds(threads: int) -> dict:
    out = {}
    for spec in (kolmogorov(2), mean_reverting(2, theta=0.5), kolmogorov(3)):
        omega = QuantilePath.from_function(lambda t: np.full(spec.n, math.sin(t)), np.linspace(0.0, spec.T, 21))
        report = check_flow_bounds(spec, omega, FlowProbe(points=1000))
        out[f"{spec.name}_{spec.n}"] = {"passed": report.passed, "identity_error": report.identity_error}
    out["passed"] = all(v["passed"] and v["identity_error"] <= 1e-8 for v in out.values())
    return out


def item_contraction(threads: int) -> dict:
    spec = mean_reverting(1, theta=1.0)
    mc = MCConfig(N=FULL_N, dt=FINE_DT, seed=17, threads=threads)
    report = contraction_study(spec, gaussian_density(1.0, 1.0, 1), mc, tol=5e-3)
    fp = report.fixed_point
    return {"t0": report.t0, "C0": report.C0, "deltas": fp.deltas, "L_hat": fp.L_hat,
            "passed": fp.converged and fp.iterations <= 10 and fp.L_hat < 1.0}


def item_cross_validation(threads: int) -> dict:
    spec = mean_reverting(1, theta=1.0)
    mc = MCConfig(N=FULL_N, dt=FINE_DT, seed=19, threads=threads)
    reports = cross_validate_scaling(spec, gaussian_density(1.0, 1.0, 1), mc=mc, sizes=(FULL_N, 2 * FULL_N),
                                     t0=0.25, tol=5e-3)
    ratio = reports[0].discrepancy / reports[1].discrepancy if reports[1].discrepancy > 0 else math.inf
    return {"discrepancies": [r.discrepancy for r in reports], "ratio": ratio,
            "passed": reports[0].discrepancy <= 0.02}


def item_stability(threads: int) -> dict:
    spec = mean_reverting(1, theta=1.0)
    base = QuantilePath.constant([1.0], spec.T)
    mc = MCConfig(N=FULL_N // 2, dt=0.005, seed=23, threads=threads)
    report = check_stability(spec, gaussian_density(1.0, 1.0, 1), shifted_pairs(base, np.linspace(0.05, 0.5, 5)),
                             shifted_pairs(base, np.linspace(0.075, 0.525, 5)), [0.25, 0.5, 1.0], mc)
    return {"C0": report.C0, "rows_passed": sum(r.passed for r in report.rows), "rows": len(report.rows),
            "passed": report.passed}


def item_tail_floor(threads: int) -> dict:
    spec = kolmogorov(2)
    init = gaussian_density([0.0, 0.0], [1.0, 1.0])
    mc = MCConfig(N=FULL_N // 2, dt=0.005, seed=29, threads=threads)
    omegas = [QuantilePath.constant([s, s], spec.T) for s in (-0.5, 0.0, 0.5)]
    times = [0.25, 0.5, 1.0]
    tail = check_tail_uniformity(spec, init, omegas, times, 0.05, mc)
    oracle = lambda t, pts: np.atleast_1d(kolmogorov_density(t, 2, 1.0).pdf(pts))
    floor = check_lower_bound(spec, init, omegas, times, tail.K, mc, oracle=oracle)
    return {"K": tail.K, "delta": floor.delta, "relative_error": floor.relative_error,
            "passed": tail.passed and floor.passed}


def item_determinism(threads: int) -> dict:
    spec = mean_reverting(2, theta=1.0)
    init = gaussian_density([1.0, 0.0], [1.0, 1.0])
    a, _ = simulate_mckean(spec, init, 0.5, FULL_N, 0.01, seed=31, threads=1)
    b, _ = simulate_mckean(spec, init, 0.5, FULL_N, 0.01, seed=31, threads=max(threads, 4))
    return {"passed": bool(np.array_equal(a.states, b.states))}


ITEMS = {
    "scaling": item_scaling,
    "oracle": item_oracle,
    "fk_vs_kde": item_fk_vs_kde,
    "gradient": item_gradient,
    "lipschitz": item_lipschitz,
    "flow_bounds": item_flow_bounds,
    "contraction": item_contraction,
    "cross_validation": item_cross_validation,
    "stability": item_stability,
    "tail_floor": item_tail_floor,
    "determinism": item_determinism,
}


def main() -> int:
    parser = argparse.ArgumentParser(description="Full-scale acceptance run")
    parser.add_argument("--only", default="", help=f"comma-separated subset of: {', '.join(ITEMS)}")
    parser.add_argument("--threads", type=int, default=config.WORKER_THREADS)
    parser.add_argument("--out", default=str(Path(config.OUTPUT_DIR) / "acceptance"))
    args = parser.parse_args()
    setup_logging()

    names = [s.strip() for s in args.only.split(",") if s.strip()] or list(ITEMS)
    unknown = [s for s in names if s not in ITEMS]
    if unknown:
        parser.error(f"unknown items {unknown}")

    print("=" * 80)
    print("ACCEPTANCE RUN")
    print("=" * 80)
    results = {}
    for name in names:
        start = time.time()
        logger.info(f"Acceptance item: {name}")
        result = ITEMS[name](args.threads)
        result["seconds"] = round(time.time() - start, 1)
        results[name] = result
        print(f"{'✅' if result['passed'] else '❌'} {name:<18} {result['seconds']:>8.1f}s")

    ArtifactStore(args.out).write_report("acceptance.txt", results, header="acceptance")
    failed = [name for name, r in results.items() if not r["passed"]]
    print("=" * 80)
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
