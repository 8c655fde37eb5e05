"""
Particle simulation tests: determinism across thread counts, initial laws, moments, blow-up
"""
import math
import os
import sys
import unittest

import numpy as np
from scipy import stats

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.density import empirical_quantile
from calculations.particles import (
    draw_initial, simulate_auxiliary, simulate_backward_fk, simulate_mckean, simulate_snapshots,
)
from calculations.random_streams import (
    STREAM_FK, STREAM_FORWARD, BlockScheduler, block_slices, initial_stream, time_grid,
)
from core.errors import ConfigurationError, PathDomainError, SimulationBlowUpError
from families.builtin import (
    gaussian_density, kolmogorov, kolmogorov_covariance, linear_chain, mean_reverting, product_density,
    rejection_density, zero_drift,
)
from models.paths import ParticleEnsemble, QuantilePath


class TestRandomStreams(unittest.TestCase):

    def test_block_slices_cover_all_particles(self):
        slices = block_slices(10, block_size=4)
        self.assertEqual([(s.start, s.stop) for s in slices], [(0, 4), (4, 8), (8, 10)])

    def test_time_grid(self):
        steps, h = time_grid(0.0, 1.0, 0.3)
        self.assertEqual(steps, 4)
        self.assertAlmostEqual(h, 0.25)
        self.assertEqual(time_grid(1.0, 1.0, 0.1), (0, 0.0))

    def test_block_results_in_order(self):
        with BlockScheduler(100, seed=1, stream=0, threads=4, block_size=10) as scheduler:
            out = scheduler.map(lambda b, sl, gen: b)
        self.assertEqual(out, list(range(10)))


class TestAuxiliarySimulation(unittest.TestCase):

    def setUp(self):
        self.spec = kolmogorov(2)
        self.init = gaussian_density([0.0, 0.0], [1.0, 1.0])
        self.omega = QuantilePath.constant([0.0, 0.0], 1.0)

    def test_same_seed_any_thread_count(self):
        # N spans several generator blocks
        a = simulate_auxiliary(self.spec, self.omega, self.init, 0.2, 10000, 0.02, seed=11, threads=1)
        b = simulate_auxiliary(self.spec, self.omega, self.init, 0.2, 10000, 0.02, seed=11, threads=4)
        np.testing.assert_array_equal(a.states, b.states)

    def test_different_seed_differs(self):
        a = simulate_auxiliary(self.spec, self.omega, self.init, 0.2, 1000, 0.02, seed=11)
        b = simulate_auxiliary(self.spec, self.omega, self.init, 0.2, 1000, 0.02, seed=12)
        self.assertFalse(np.array_equal(a.states, b.states))

    def test_brownian_variance(self):
        spec = zero_drift(1)
        ens = simulate_auxiliary(spec, QuantilePath.constant([0.0], 1.0), gaussian_density(0.0, 1.0, 1),
                                 1.0, 20000, 0.05, seed=5)
        self.assertAlmostEqual(float(ens.variance()[0]), 2.0, delta=0.1)

    def test_recorded_quantile_path(self):
        ens = simulate_auxiliary(self.spec, self.omega, self.init, 0.5, 2000, 0.01, seed=3, record_every=10)
        self.assertEqual(ens.path.t_start, 0.0)
        self.assertAlmostEqual(ens.path.t_end, 0.5)
        self.assertEqual(ens.path.times.size, 6)
        np.testing.assert_array_equal(ens.path.values[-1], empirical_quantile(ens.states, self.spec.alpha))

    def test_path_must_cover_run(self):
        with self.assertRaises(PathDomainError):
            simulate_auxiliary(self.spec, QuantilePath.constant([0.0, 0.0], 0.1), self.init, 0.5, 100, 0.01, seed=1)

    def test_ensemble_size_mismatch(self):
        start = ParticleEnsemble.point([0.0, 0.0], N=50)
        with self.assertRaises(ConfigurationError):
            simulate_auxiliary(self.spec, self.omega, start, 0.5, 100, 0.01, seed=1)

    def test_snapshots_match_single_runs(self):
        snaps = simulate_snapshots(self.spec, self.omega, self.init, [0.1, 0.2], 500, 0.01, seed=9)
        single = simulate_auxiliary(self.spec, self.omega, self.init, 0.2, 500, 0.01, seed=9)
        np.testing.assert_array_equal(snaps[0.2].states, single.states)
        self.assertEqual(sorted(snaps), [0.1, 0.2])

    def test_blow_up_detected(self):
        spec = linear_chain(1, 10.0, 0.5, [[1e10]])
        with self.assertRaises(SimulationBlowUpError):
            simulate_auxiliary(spec, QuantilePath.constant([0.0], 10.0), gaussian_density(1.0, 1.0, 1),
                               10.0, 100, 0.1, seed=1)


class TestMcKeanSimulation(unittest.TestCase):

    def test_path_starts_at_initial_quantile(self):
        spec = mean_reverting(1, theta=1.0)
        init = gaussian_density(1.0, 1.0, 1)
        ens, path = simulate_mckean(spec, init, 0.5, 4000, 0.01, seed=2, record_every=5)
        ens0 = draw_initial(init, 1, 4000, seed=2)
        np.testing.assert_array_equal(path.values[0], empirical_quantile(ens0.states, 0.5))
        self.assertAlmostEqual(path.t_end, 0.5)
        # median reverts to itself and stays near 1
        self.assertAlmostEqual(float(path.values[-1, 0]), 1.0, delta=0.1)


class TestBackwardFK(unittest.TestCase):

    def test_time_must_be_positive(self):
        spec = zero_drift(1)
        with self.assertRaises(ConfigurationError):
            simulate_backward_fk(spec, QuantilePath.constant([0.0], 1.0), 0.0, [0.0], 10, 0.01, seed=1)

    def test_jacobian_of_constant_coefficients(self):
        spec = kolmogorov(2)
        samples = simulate_backward_fk(spec, QuantilePath.constant([0.0, 0.0], 1.0), 0.5, [0.0, 0.0],
                                       20, 0.01, seed=1, with_jacobian=True)
        # b = -F: J' = -A J, so J_t = I - t A exactly under Euler for nilpotent A
        np.testing.assert_allclose(samples.jacobian[0], [[1.0, 0.0], [-0.5, 1.0]], atol=1e-12)
        np.testing.assert_allclose(samples.exponent, 0.0)


def standard_normal_by_rejection():
    """N(0, 1) through the rejection sampler; the envelope equals the target"""
    return rejection_density(lambda x: stats.norm.pdf(x[:, 0]), lambda x: -x * stats.norm.pdf(x),
                             1, [0.0], [1.0], bound=1.0, name="normal_rejection")


def epanechnikov(x):
    x = np.asarray(x)[:, 0]
    return np.where(np.abs(x) < 1.0, 0.75 * (1.0 - x * x), 0.0)


class TestInitialLaw(unittest.TestCase):

    def test_initial_draw_independent_of_increments(self):
        N, dt = 20000, 0.01
        init = standard_normal_by_rejection()
        ens0 = draw_initial(init, 1, N, seed=4)
        ens1 = simulate_auxiliary(zero_drift(1), QuantilePath.constant([0.0], 1.0), init, dt, N, dt, seed=4)
        dW = ens1.states[:, 0] - ens0.states[:, 0]
        # draw_initial reproduces the run's X_0, so the difference is one increment
        self.assertAlmostEqual(float(np.std(dW)), math.sqrt(dt), delta=0.05 * math.sqrt(dt))
        self.assertLess(abs(float(np.corrcoef(ens0.states[:, 0], dW)[0, 1])), 0.05)
        # starting from the materialized ensemble gives the same run
        from_ens0 = simulate_auxiliary(zero_drift(1), QuantilePath.constant([0.0], 1.0), ens0, dt, N, dt, seed=4)
        np.testing.assert_array_equal(from_ens0.states, ens1.states)

    def test_initial_stream_is_distinct(self):
        self.assertNotEqual(initial_stream(STREAM_FORWARD), STREAM_FORWARD)
        self.assertNotEqual(initial_stream(STREAM_FK), initial_stream(STREAM_FORWARD))

    def test_rejection_sampler_moments(self):
        init = rejection_density(epanechnikov, lambda x: -1.5 * x * (np.abs(x) < 1.0), 1,
                                 [0.0], [1.0], bound=2.0, name="epanechnikov")
        x = draw_initial(init, 1, 20000, seed=6).states[:, 0]
        self.assertTrue(np.all(np.abs(x) < 1.0))
        self.assertAlmostEqual(float(x.mean()), 0.0, delta=0.015)
        self.assertAlmostEqual(float(x.var()), 0.2, delta=0.008)

    def test_rejection_bound_too_small(self):
        init = rejection_density(epanechnikov, lambda x: -1.5 * x, 1, [0.0], [1.0], bound=1.0)
        with self.assertRaises(ConfigurationError):
            draw_initial(init, 1, 1000, seed=6)

    def test_product_density_moments(self):
        init = product_density([stats.norm(1.0, 2.0), stats.expon()])
        x = draw_initial(init, 2, 20000, seed=8).states
        np.testing.assert_allclose(x.mean(axis=0), [1.0, 1.0], atol=0.06)
        self.assertAlmostEqual(float(x[:, 0].var()), 4.0, delta=0.2)
        self.assertAlmostEqual(float(x[:, 1].var()), 1.0, delta=0.1)
        self.assertTrue(np.all(x[:, 1] >= 0.0))

    def test_product_density_values_and_gradient(self):
        init = product_density([stats.norm(1.0, 2.0), stats.expon()])
        point = np.array([[0.0, 1.0]])
        p0, p1 = stats.norm(1.0, 2.0).pdf(0.0), math.exp(-1.0)
        np.testing.assert_allclose(init.f(point), [p0 * p1], rtol=1e-12)
        np.testing.assert_allclose(init.grad_f(point), [[0.25 * p0 * p1, -p0 * p1]], rtol=1e-6)


class TestKolmogorovMoments(unittest.TestCase):

    def test_integrated_brownian_covariance(self):
        t, N = 1.0, 20000
        ens = simulate_auxiliary(kolmogorov(2), QuantilePath.constant([0.0, 0.0], t),
                                 ParticleEnsemble.point([0.0, 0.0], N=N), t, N, 0.01, seed=13)
        cov = np.cov(ens.states.T)
        self.assertAlmostEqual(float(cov[1, 1]), t ** 3 / 3.0, delta=0.02)
        np.testing.assert_allclose(cov, kolmogorov_covariance(t, 2), atol=0.03)


if __name__ == '__main__':
    unittest.main()
