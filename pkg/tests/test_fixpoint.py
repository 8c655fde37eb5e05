"""
Picard iteration, interval sizing and chaining, cross-validation
"""
import math
import os
import sys
import unittest

import numpy as np
from scipy import stats

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.fixpoint import (
    apply_M, choose_t0, contraction_rate, cross_validate, fit_C0, picard_solve, shifted_pairs,
    solve_global, stability_rows,
)
from calculations.particles import draw_initial
from calculations.random_streams import STREAM_FORWARD
from core.errors import ConfigurationError, ConstantTooLargeError, InsufficientSignalError, NonContractionError
from families.builtin import (
    gaussian_density, kolmogorov, kolmogorov_covariance, mean_reverting, rejection_density, zero_drift,
)
from models.model_spec import MCConfig
from models.paths import QuantilePath

MC = MCConfig(N=2000, dt=0.01, seed=17, threads=1, thin=5)


class TestContractionRate(unittest.TestCase):

    def test_geometric_sequence(self):
        self.assertAlmostEqual(contraction_rate([1.0, 0.5, 0.25, 0.125]), 0.5)

    def test_exact_zero_after_one_step(self):
        self.assertEqual(contraction_rate([0.3, 0.0]), 0.0)

    def test_single_delta_is_undetermined(self):
        self.assertTrue(math.isnan(contraction_rate([0.3])))


class TestChooseT0(unittest.TestCase):

    def test_closed_form(self):
        # A = 1, L = 1: sqrt(t0) = (sqrt(5) - 1) / 2
        self.assertAlmostEqual(choose_t0(1.0, 1.0, 1.0, 1, target_L=1.0), 0.381966, places=6)

    def test_root_satisfies_inequality(self):
        C0, K, delta, n, L = 0.8, 2.0, 0.05, 2, 0.5
        t0 = choose_t0(C0, K, delta, n, L)
        A = C0 * math.sqrt(n) * (2.0 * K) ** (1 - n) / delta
        self.assertAlmostEqual(A * (t0 + math.sqrt(t0)), L, places=10)

    def test_cap_and_zero_constant(self):
        self.assertEqual(choose_t0(0.0, 1.0, 1.0, 1, cap=0.7), 0.7)
        self.assertEqual(choose_t0(1e-6, 1.0, 1.0, 1, cap=0.3), 0.3)

    def test_too_large(self):
        with self.assertRaises(ConstantTooLargeError):
            choose_t0(1e9, 1.0, 1.0, 1, min_t0=0.01)


class TestFitC0(unittest.TestCase):

    def test_slope_times_safety(self):
        rows = [{"x": x, "lhs": 2.0 * x, "gap": g} for x, g in ((0.1, 0.1), (0.2, 0.2), (0.4, 0.4))]
        self.assertAlmostEqual(fit_C0(rows, safety=1.5), 3.0)

    def test_all_zero(self):
        rows = [{"x": 0.1, "lhs": 0.0, "gap": 0.1}]
        self.assertEqual(fit_C0(rows), 0.0)

    def test_needs_three_distinct_gaps(self):
        rows = [{"x": 0.1, "lhs": 0.2, "gap": 0.1}, {"x": 0.1, "lhs": 0.3, "gap": 0.1}]
        with self.assertRaises(InsufficientSignalError):
            fit_C0(rows)


class TestPicard(unittest.TestCase):

    def test_quantile_free_model_converges_in_two_steps(self):
        # the map ignores omega, so the second iterate repeats the first exactly
        spec = zero_drift(1, T=1.0)
        path, report = picard_solve(spec, gaussian_density(0.0, 1.0, 1), 0.2, tol=1e-3, mc=MC, recheck=False)
        self.assertTrue(report.converged)
        self.assertEqual(report.iterations, 2)
        self.assertEqual(report.deltas[-1], 0.0)
        self.assertAlmostEqual(path.t_end, 0.2)

    def test_mean_reversion_contracts(self):
        spec = mean_reverting(1, theta=1.0)
        init = gaussian_density(1.0, 1.0, 1)
        start = QuantilePath.constant([0.0], 0.5)
        path, report = picard_solve(spec, init, 0.5, tol=1e-3, mc=MC, omega0=start)
        self.assertTrue(report.converged)
        self.assertGreaterEqual(report.iterations, 3)
        self.assertLess(report.L_hat, 1.0)
        self.assertLess(report.deltas[1], report.deltas[0])
        self.assertIsNotNone(report.recheck_delta)

    def test_fixed_point_is_reproduced_by_the_map(self):
        spec = mean_reverting(1, theta=1.0)
        init = gaussian_density(1.0, 1.0, 1)
        path, _ = picard_solve(spec, init, 0.5, tol=1e-4, mc=MC, recheck=False)
        ens0 = draw_initial(init, 1, MC.N, MC.seed, STREAM_FORWARD, MC.threads)
        self.assertLess(apply_M(spec, ens0, path, MC).sup_distance(path), 1e-3)

    def test_non_contraction_reported(self):
        spec = zero_drift(1, T=1.0)
        with self.assertRaises(NonContractionError) as ctx:
            picard_solve(spec, gaussian_density(0.0, 1.0, 1), 0.2, tol=1e-12, max_iter=1, mc=MC, recheck=False)
        self.assertEqual(len(ctx.exception.deltas), 1)

    def test_bad_tolerance(self):
        with self.assertRaises(ConfigurationError):
            picard_solve(zero_drift(1), gaussian_density(0.0, 1.0, 1), 0.2, tol=0.0, mc=MC)


class TestPicardQuantileOracle(unittest.TestCase):
    """Fixed points of omega-free models against their exact Gaussian quantiles"""

    ORACLE_MC = MCConfig(N=20000, dt=0.01, seed=29, threads=1, thin=10)

    def setUp(self):
        # N(0, 1) start drawn with standard normals, as the increments are
        self.init = rejection_density(lambda x: stats.norm.pdf(x[:, 0]), lambda x: -x * stats.norm.pdf(x),
                                      1, [0.0], [1.0], bound=1.0)

    def assert_within_3se(self, estimate, alpha, sd):
        q = sd * stats.norm.ppf(alpha)
        se = math.sqrt(alpha * (1.0 - alpha) / self.ORACLE_MC.N) / stats.norm.pdf(q, scale=sd)
        self.assertLess(abs(estimate - q), 3.0 * se)

    def test_brownian_upper_quantile(self):
        path, report = picard_solve(zero_drift(1, alpha=0.9), self.init, 1.0, mc=self.ORACLE_MC)
        self.assertTrue(report.converged)
        # X_1 = X_0 + W_1 ~ N(0, 2)
        self.assert_within_3se(float(path.at(1.0)[0]), 0.9, math.sqrt(2.0))

    def test_integrated_brownian_quantile(self):
        spec = kolmogorov(2, alpha=[0.9, 0.9])
        init = gaussian_density([0.0, 0.0], [1.0, 1.0])
        path, _ = picard_solve(spec, init, 1.0, mc=self.ORACLE_MC)
        sd = np.sqrt(np.diag(kolmogorov_covariance(1.0, 2, init_var=[1.0, 1.0])))
        self.assert_within_3se(float(path.at(1.0)[0]), 0.9, float(sd[0]))
        self.assert_within_3se(float(path.at(1.0)[1]), 0.9, float(sd[1]))


class TestGlobalSolve(unittest.TestCase):

    def test_chained_intervals_join_exactly(self):
        spec = mean_reverting(1, theta=1.0, T=0.4)
        path, report = solve_global(spec, gaussian_density(1.0, 1.0, 1), tol=1e-3, mc=MC, t0=0.2,
                                    recheck=False)
        self.assertEqual(len(report.chained_intervals), 2)
        self.assertEqual(report.junction_gaps, [0.0])
        self.assertAlmostEqual(path.t_start, 0.0)
        self.assertAlmostEqual(path.t_end, 0.4)
        self.assertTrue(np.all(np.diff(path.times) > 0))

    def test_fixed_policy_needs_t0(self):
        with self.assertRaises(ConfigurationError):
            solve_global(zero_drift(1), gaussian_density(0.0, 1.0, 1), mc=MC)

    def test_cross_validation(self):
        spec = mean_reverting(1, theta=1.0, T=0.4)
        report = cross_validate(spec, gaussian_density(1.0, 1.0, 1), mc=MC.with_N(5000), t0=0.2, tol=1e-3)
        self.assertTrue(report.within_tolerance, report)
        self.assertGreater(report.threshold, 3.0 * report.combined_stderr)


class TestStabilityRows(unittest.TestCase):

    def test_identical_pair_has_zero_distance(self):
        spec = mean_reverting(1, theta=1.0)
        base = QuantilePath.constant([1.0], 0.5)
        rows = stability_rows(spec, gaussian_density(1.0, 1.0, 1), [0.25, 0.5], [(base, base)], MC, None, 0)
        self.assertEqual([r["lhs"] for r in rows], [0.0, 0.0])

    def test_distance_grows_with_shift(self):
        spec = mean_reverting(1, theta=1.0)
        base = QuantilePath.constant([1.0], 0.5)
        rows = stability_rows(spec, gaussian_density(1.0, 1.0, 1), [0.5], shifted_pairs(base, [0.2, 0.8]),
                              MC, None, 0)
        self.assertLess(rows[0]["lhs"], rows[1]["lhs"])
        self.assertAlmostEqual(rows[1]["gap"], 0.8)
        self.assertAlmostEqual(rows[1]["x"], (0.5 + math.sqrt(0.5)) * 0.8)


if __name__ == '__main__':
    unittest.main()
