"""
Coefficient evaluation, hypothesis probes and the integrability functional
"""
import math
import os
import sys
import unittest

import numpy as np
from scipy import integrate, stats

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.coefficients import compute_U, compute_U_report, eval_a, eval_b, eval_c, validate_hypotheses
from core.errors import ConfigurationError, IntegrabilityViolationError
from families.builtin import (
    chain_matrix, gaussian_density, kolmogorov, linear_chain, mean_reverting, product_density, zero_drift,
)
from models.model_spec import HypothesisProbe, InitialDensity, ModelSpec

PROBE = HypothesisProbe(points=200, seed=3)


def sub_diagonal_chain(slope, antiderivative):
    """n = 2 chain F = (0, G(t, x_1)) with dG/dx_1 = slope(t, x_1) in [0.5, 1]"""
    def F(t, y, x):
        out = np.zeros_like(x)
        out[:, 1] = antiderivative(t, x[:, 0])
        return out

    def dF(t, y, x):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 1, 0] = slope(t, x[:, 0])
        return out

    zeros = lambda t, y, x: np.zeros(x.shape[0])
    return ModelSpec(
        name="sub_diagonal", n=2, T=1.0, alpha=[0.5, 0.5], F=F, dF=dF,
        sigma=lambda t, y, x: np.ones(x.shape[0]), da=zeros, d2a=zeros,
        grad_sigma=lambda t, y, x: np.zeros_like(x), grad_c=lambda t, y, x: np.zeros_like(x),
        eta=1.0, kappa=1.0, Lambda=1.0,
    )


class TestCoefficients(unittest.TestCase):

    def test_kolmogorov_values(self):
        spec = kolmogorov(2)
        y = np.zeros(2)
        self.assertAlmostEqual(eval_a(spec, 0.5, y, [1.0, 2.0]), 1.0)
        self.assertAlmostEqual(eval_c(spec, 0.5, y, [1.0, 2.0]), 0.0)
        # b = -F for constant sigma
        np.testing.assert_allclose(eval_b(spec, 0.5, y, [1.0, 2.0]), [0.0, -1.0])

    def test_mean_reverting_c_is_theta(self):
        spec = mean_reverting(1, theta=0.7)
        self.assertAlmostEqual(eval_c(spec, 0.1, np.zeros(1), [3.0]), 0.7)

    def test_time_outside_horizon(self):
        with self.assertRaises(ConfigurationError):
            eval_a(kolmogorov(1, T=1.0), 2.0, np.zeros(1), [0.0])

    def test_chain_structure_enforced(self):
        A = np.zeros((3, 3))
        A[2, 0] = 1.0
        with self.assertRaises(ConfigurationError):
            linear_chain(3, 1.0, 0.5, A)


class TestHypotheses(unittest.TestCase):

    def test_kolmogorov_passes_everything(self):
        report = validate_hypotheses(kolmogorov(3), PROBE)
        self.assertTrue(report.all_passed, [c.name for c in report.failed()])
        self.assertEqual({c.name for c in report.checks}, {"H1", "H2", "H3", "H4", "H5", "chain", "c_bound"})

    def test_mean_reverting_violates_H1_only(self):
        report = validate_hypotheses(mean_reverting(1, theta=1.0), PROBE)
        self.assertEqual([c.name for c in report.failed()], ["H1"])

    def test_ellipticity_violation_reported(self):
        # sigma in [0.5, 1.5] needs Lambda >= 4
        spec = linear_chain(1, 1.0, 0.5, [[0.0]], sigma_amplitude=0.5, Lambda=1.5)
        report = validate_hypotheses(spec, PROBE)
        self.assertIn("H2", [c.name for c in report.failed()])

    def test_H5_rough_in_previous_coordinate(self):
        # dF_2/dx_1 = 0.75 + 0.25 sin(50 x_1): bounded, above the floor, Lipschitz constant 12.5
        spec = sub_diagonal_chain(
            lambda t, x1: 0.75 + 0.25 * np.sin(50.0 * x1),
            lambda t, x1: 0.75 * x1 + 0.005 * (1.0 - np.cos(50.0 * x1)),
        )
        report = validate_hypotheses(spec, PROBE)
        self.assertEqual([c.name for c in report.failed()], ["H5"])
        h5 = next(c for c in report.checks if c.name == "H5")
        self.assertGreater(h5.witness["holder_ratio"], 1.0)
        self.assertGreaterEqual(h5.worst_value, 0.5)

    def test_H5_ignores_time_dependence(self):
        spec = sub_diagonal_chain(
            lambda t, x1: np.full_like(x1, 0.75 + 0.25 * math.sin(50.0 * t)),
            lambda t, x1: (0.75 + 0.25 * math.sin(50.0 * t)) * x1,
        )
        report = validate_hypotheses(spec, PROBE)
        self.assertTrue(report.all_passed, [c.name for c in report.failed()])


class TestZerothOrderTerm(unittest.TestCase):
    """c = div b - (1/2) d2a/dx_1^2, rebuilt from central differences of b and a"""

    FAMILIES = {
        "kolmogorov": kolmogorov(3),
        "mean_reverting": mean_reverting(2, theta=0.7),
        "zero_drift": zero_drift(2),
        "perturbed_chain": linear_chain(2, 1.0, 0.5, chain_matrix(2), drift_amplitude=0.3, drift_frequency=2.0,
                                        sigma_amplitude=0.4, sigma_frequency=1.5),
    }

    def test_c_matches_divergence_of_b(self):
        rng = np.random.default_rng(12)
        h = 1e-4
        for name, spec in self.FAMILIES.items():
            n = spec.n
            x = rng.uniform(-2.0, 2.0, (20, n))
            y = rng.uniform(-1.0, 1.0, n)
            t = 0.3
            div_b = np.zeros(x.shape[0])
            for j in range(n):
                e = np.zeros(n)
                e[j] = h
                div_b += (eval_b(spec, t, y, x + e)[:, j] - eval_b(spec, t, y, x - e)[:, j]) / (2.0 * h)
            e1 = np.zeros(n)
            e1[0] = 1e-3
            d2a = (eval_a(spec, t, y, x + e1) - 2.0 * eval_a(spec, t, y, x) + eval_a(spec, t, y, x - e1)) / 1e-6
            np.testing.assert_allclose(eval_c(spec, t, y, x), div_b - 0.5 * d2a, atol=1e-4, err_msg=name)


class TestIntegrability(unittest.TestCase):

    def test_standard_normal_closed_form(self):
        init = gaussian_density(0.0, 1.0, 1)
        f = lambda r: stats.norm.pdf(r)

        # sup over |z| >= r: f is decreasing, |f'| = r f peaks at r = 1
        g4_peak = (1.0 * f(1.0)) ** 4
        weight = lambda r: r ** 4 + 1.0
        f_term = integrate.quad(lambda r: f(r) ** 2 * weight(r), 0.0, np.inf)[0]
        g_term = (integrate.quad(lambda r: g4_peak * weight(r), 0.0, 1.0)[0]
                  + integrate.quad(lambda r: (r * f(r)) ** 4 * weight(r), 1.0, np.inf)[0])

        self.assertAlmostEqual(f_term, 7.0 * math.sqrt(math.pi) / 8.0 / (2.0 * math.pi), places=8)
        U = compute_U(init, eps=1.0)
        self.assertAlmostEqual(U, f_term + g_term, delta=0.01 * (f_term + g_term))

    def test_report_terms_add_up(self):
        report = compute_U_report(gaussian_density([0.0, 0.0], [1.0, 2.0]), eps=0.5)
        self.assertAlmostEqual(report.U, report.f_term + report.grad_term)
        self.assertGreater(report.U_local, 0.0)

    def test_heavy_tails_rejected(self):
        init = product_density([stats.cauchy()])
        with self.assertRaises(IntegrabilityViolationError):
            compute_U(init)

    def test_gradient_required(self):
        init = InitialDensity(n=1, f=lambda x: np.ones(len(x)), sampler=lambda rng, size: rng.random((size, 1)))
        with self.assertRaises(ConfigurationError):
            compute_U(init)


if __name__ == '__main__':
    unittest.main()
