"""
Feynman-Kac density and gradient estimates against closed-form Gaussian laws
"""
import math
import os
import sys
import unittest

import numpy as np
import pandas as pd
from scipy import stats

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.feynman_kac import (
    density_terms, estimate_Uprime, evaluate_grad_u, evaluate_u, evaluate_u_batch, gradient_terms,
)
from calculations.particles import simulate_backward_fk
from core.errors import ConfigurationError
from families.builtin import (
    chain_matrix, gaussian_density, kolmogorov, kolmogorov_covariance, kolmogorov_density, linear_chain,
    mean_reverting, zero_drift,
)
from models.model_spec import RadialPlan
from models.paths import QuantilePath


class TestBrownianDensity(unittest.TestCase):
    """X_0 ~ N(0, 1), dX = dW: u_1 = N(0, 2)"""

    def setUp(self):
        self.spec = zero_drift(1, T=1.0)
        self.init = gaussian_density(0.0, 1.0, 1)
        self.omega = QuantilePath.constant([0.0], 1.0)

    def test_value_at_origin(self):
        est = evaluate_u(self.spec, self.omega, self.init, 1.0, [0.0], N=20000, dt=0.01, seed=1)
        self.assertAlmostEqual(est.value, 1.0 / math.sqrt(4.0 * math.pi), delta=4.0 * est.stderr + 1e-3)
        self.assertAlmostEqual(1.0 / math.sqrt(4.0 * math.pi), 0.2821, delta=1e-4)
        self.assertFalse(est.near_initial)

    def test_gradient(self):
        est = evaluate_grad_u(self.spec, self.omega, self.init, 1.0, [1.0], N=20000, dt=0.01, seed=2)
        exact = -0.5 * stats.norm.pdf(1.0, scale=math.sqrt(2.0))
        self.assertAlmostEqual(exact, -0.1099, delta=1e-4)
        self.assertAlmostEqual(float(est.value[0]), exact, delta=4.0 * float(est.stderr[0]) + 1e-3)

    def test_time_range(self):
        with self.assertRaises(ConfigurationError):
            evaluate_u(self.spec, self.omega, self.init, 0.0, [0.0], N=10, dt=0.01, seed=1)
        with self.assertRaises(ConfigurationError):
            evaluate_u(self.spec, self.omega, self.init, 1.5, [0.0], N=10, dt=0.01, seed=1)

    def test_near_initial_flag(self):
        est = evaluate_u(self.spec, self.omega, self.init, 0.05, [0.0], N=100, dt=0.01, seed=1)
        self.assertTrue(est.near_initial)

    def test_batch(self):
        points = pd.DataFrame({"t": [0.5, 1.0], "x1": [0.0, 1.0]})
        table = evaluate_u_batch(self.spec, self.omega, self.init, points, N=2000, dt=0.05, seed=3)
        self.assertEqual(list(table.columns), ["t", "x1", "value", "stderr"])
        self.assertTrue((table["value"] > 0).all())

    def test_batch_needs_coordinates(self):
        with self.assertRaises(ConfigurationError):
            evaluate_u_batch(self.spec, self.omega, self.init, pd.DataFrame({"t": [0.5]}), N=10, dt=0.1, seed=1)


class TestKolmogorovDensity(unittest.TestCase):
    """n = 2 integrated Brownian motion from N(0, 0.1 I): u_t is Gaussian in closed form"""

    def setUp(self):
        self.spec = kolmogorov(2)
        self.init = gaussian_density([0.0, 0.0], [0.1, 0.1])
        self.omega = QuantilePath.constant([0.0, 0.0], self.spec.T)

    def test_matches_exact_law(self):
        exact = kolmogorov_density(0.5, 2, 0.1)
        for x in ([0.0, 0.0], [0.3, 0.1], [-0.4, -0.2]):
            est = evaluate_u(self.spec, self.omega, self.init, 0.5, x, N=20000, dt=0.005, seed=7)
            self.assertAlmostEqual(est.value, float(exact.pdf(x)), delta=4.0 * est.stderr + 0.01, msg=str(x))

    def test_gradient_matches_exact_law(self):
        law = kolmogorov_density(0.5, 2, 0.1)
        x = np.array([0.3, 0.1])
        exact = -np.linalg.solve(kolmogorov_covariance(0.5, 2, 0.1), x) * law.pdf(x)
        est = evaluate_grad_u(self.spec, self.omega, self.init, 0.5, x, N=20000, dt=0.005, seed=8)
        np.testing.assert_allclose(est.value, exact, atol=4.0 * float(np.max(est.stderr)) + 0.02)


class TestGradientTerms(unittest.TestCase):
    """Per-path gradient terms are the derivative of the per-path density terms"""

    def test_common_paths_central_differences(self):
        spec = linear_chain(2, 1.0, 0.5, chain_matrix(2), drift_amplitude=0.3, drift_frequency=2.0,
                            sigma_amplitude=0.3, sigma_frequency=1.5)
        init = gaussian_density([0.0, 0.0], [0.5, 0.5])
        omega = QuantilePath.constant([0.0, 0.0], spec.T)
        h = 1e-4
        for x in (np.array([0.2, -0.1]), np.array([-0.5, 0.4])):
            samples = simulate_backward_fk(spec, omega, 0.5, x, 500, 0.01, seed=11,
                                           with_jacobian=True, with_c_gradient=True)
            grad = gradient_terms(init, samples)
            for j in range(2):
                step = np.zeros(2)
                step[j] = h
                plus = density_terms(init, simulate_backward_fk(spec, omega, 0.5, x + step, 500, 0.01, seed=11))
                minus = density_terms(init, simulate_backward_fk(spec, omega, 0.5, x - step, 500, 0.01, seed=11))
                np.testing.assert_allclose(grad[:, j], (plus - minus) / (2.0 * h), rtol=1e-4, atol=1e-7)


class TestOrnsteinUhlenbeckDensity(unittest.TestCase):
    """dX = -X dt + dW with omega = 0: the exponential weight carries c = 1"""

    def test_value_at_origin(self):
        spec = mean_reverting(1, theta=1.0)
        omega = QuantilePath.constant([0.0], 1.0)
        est = evaluate_u(spec, omega, gaussian_density(0.0, 1.0, 1), 1.0, [0.0], N=20000, dt=0.01, seed=4)
        var = math.exp(-2.0) + 0.5 * (1.0 - math.exp(-2.0))
        exact = 1.0 / math.sqrt(2.0 * math.pi * var)
        self.assertAlmostEqual(est.value, exact, delta=4.0 * est.stderr + 0.01)


class TestUprime(unittest.TestCase):

    def test_envelope_is_finite(self):
        spec = zero_drift(1, T=1.0)
        plan = RadialPlan(max_radius=8.0, radial_nodes=8, directions=2, dt=0.05)
        est = estimate_Uprime(spec, QuantilePath.constant([0.0], 1.0), gaussian_density(0.0, 1.0, 1),
                              t0=0.25, t=0.5, plan=plan, N=500)
        self.assertEqual(est.times, [0.25, 0.5])
        self.assertTrue(est.finite)
        self.assertGreater(est.value, 0.0)
        self.assertIn(est.diagnostics["argmax_time"], est.times)

    def test_t0_must_precede_t(self):
        with self.assertRaises(ConfigurationError):
            estimate_Uprime(zero_drift(1), QuantilePath.constant([0.0], 1.0), gaussian_density(0.0, 1.0, 1),
                            t0=0.6, t=0.5)


if __name__ == '__main__':
    unittest.main()
