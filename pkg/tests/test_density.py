"""
Density estimation, quantiles, L1 distances and the set S
"""
import math
import os
import sys
import unittest

import numpy as np
from scipy import stats

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from calculations.density import (
    DensityEstimate, GridSpec, check_quantile_lipschitz, empirical_quantile, find_s_params,
    l1_distance, lipschitz_constant, quantile_stderr, s_membership, silverman_bandwidth,
)
from core.errors import DegenerateFamilyError, DomainError, PreconditionError
from models.results import SParams


def normal_grid(mean=0.0, sd=1.0, half_width=8.0, nodes=512):
    pdf = lambda x: stats.norm.pdf(x[:, 0], loc=mean, scale=sd)
    return DensityEstimate.from_pdf(pdf, [-half_width], [half_width], nodes)


class TestEmpiricalQuantile(unittest.TestCase):

    def test_order_statistic(self):
        states = np.arange(1.0, 11.0)[::-1]
        self.assertEqual(float(empirical_quantile(states, 0.5)[0]), 5.0)
        self.assertEqual(float(empirical_quantile(states, 0.51)[0]), 6.0)
        self.assertEqual(float(empirical_quantile(states, 0.05)[0]), 1.0)

    def test_componentwise(self):
        states = np.column_stack([np.arange(100.0), -np.arange(100.0)])
        q = empirical_quantile(states, [0.25, 0.75])
        np.testing.assert_array_equal(q, [24.0, -25.0])

    def test_alpha_out_of_range(self):
        with self.assertRaises(DomainError):
            empirical_quantile(np.zeros(5), 0.0)

    def test_stderr(self):
        rng = np.random.default_rng(0)
        se = quantile_stderr(rng.standard_normal((10000, 1)), 0.5)
        expected = math.sqrt(0.25 / 10000) / stats.norm.pdf(0.0)
        self.assertAlmostEqual(float(se[0]), expected, delta=0.1 * expected)


class TestKernelEstimate(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(1)
        self.samples = rng.standard_normal((20000, 1))
        self.u = DensityEstimate.from_ensemble(self.samples)

    def test_silverman_bandwidth(self):
        h = silverman_bandwidth(self.samples)
        self.assertAlmostEqual(float(h[0]), 0.9 * 20000 ** -0.2, delta=0.02)

    def test_degenerate_samples(self):
        with self.assertRaises(DomainError):
            DensityEstimate.from_ensemble(np.ones((100, 1)))

    def test_pointwise_value(self):
        self.assertAlmostEqual(float(self.u.evaluate([0.0])[0]), stats.norm.pdf(0.0), delta=0.03)

    def test_grid_rendering_has_unit_mass(self):
        lower, upper = self.u.box()
        grid = self.u.to_grid(GridSpec.box(lower, upper, 256))
        self.assertAlmostEqual(grid.mass, 1.0, delta=1e-3)

    def test_smoothed_quantile(self):
        self.assertAlmostEqual(float(self.u.quantile(0.5)[0]), 0.0, delta=0.05)


class TestGridEstimate(unittest.TestCase):

    def test_quantiles(self):
        u = normal_grid()
        self.assertAlmostEqual(float(u.quantile(0.5)[0]), 0.0, delta=0.01)
        self.assertAlmostEqual(float(u.quantile(0.975)[0]), 1.959964, delta=0.02)

    def test_tail_mass(self):
        self.assertAlmostEqual(normal_grid().tail_mass(1.959964), 0.05, delta=0.003)

    def test_negative_values_rejected(self):
        with self.assertRaises(DomainError):
            DensityEstimate.from_grid(GridSpec.box([0.0], [1.0], 4), np.array([1.0, -1.0, 1.0, 1.0]))

    def test_frame_export(self):
        u = normal_grid(nodes=64)
        back = DensityEstimate.from_frame(u.to_frame())
        self.assertEqual(back.grid.nodes, (64,))
        np.testing.assert_allclose(back.values, u.values)
        np.testing.assert_allclose(back.grid.lower, u.grid.lower)

    def test_mixture(self):
        mixed = normal_grid(-1.0).mix(normal_grid(1.0), 0.5)
        self.assertAlmostEqual(mixed.mass, 1.0, delta=1e-3)
        self.assertAlmostEqual(float(mixed.quantile(0.5)[0]), 0.0, delta=0.02)


class TestL1Distance(unittest.TestCase):

    def test_identical(self):
        self.assertEqual(l1_distance(normal_grid(), normal_grid()), 0.0)

    def test_shifted_normals(self):
        exact = 2.0 * (2.0 * stats.norm.cdf(0.5) - 1.0)
        self.assertAlmostEqual(l1_distance(normal_grid(0.0), normal_grid(1.0)), exact, delta=0.01)

    def test_disjoint_grids(self):
        a = DensityEstimate.from_pdf(lambda x: np.ones(len(x)), [0.0], [1.0], 8)
        b = DensityEstimate.from_pdf(lambda x: np.ones(len(x)), [2.0], [3.0], 8)
        with self.assertRaises(DomainError):
            l1_distance(a, b)

    def test_dimension_mismatch(self):
        a = DensityEstimate.from_ensemble(np.random.default_rng(0).standard_normal((100, 1)))
        b = DensityEstimate.from_ensemble(np.random.default_rng(0).standard_normal((100, 2)))
        with self.assertRaises(DomainError):
            l1_distance(a, b)


class TestSetS(unittest.TestCase):

    def test_lipschitz_constant(self):
        self.assertAlmostEqual(lipschitz_constant(1, 3.0, 0.5), 2.0)
        self.assertAlmostEqual(lipschitz_constant(2, 1.0, 1.0), math.sqrt(2.0) / 2.0)

    def test_find_s_params(self):
        family = [normal_grid(0.0), normal_grid(0.3, 1.1)]
        s = find_s_params(family, 0.5)
        self.assertAlmostEqual(s.eps, 0.25)
        for u in family:
            member = s_membership(u, s, 0.5)
            self.assertTrue(member.member)

    def test_degenerate_family(self):
        # no mass near the origin
        bumps = lambda x: np.where((np.abs(x[:, 0]) >= 3.0) & (np.abs(x[:, 0]) <= 5.0), 0.25, 0.0)
        u = DensityEstimate.from_pdf(bumps, [-8.0], [8.0], 512)
        with self.assertRaises(DegenerateFamilyError):
            find_s_params([u], 0.5)

    def test_quantile_lipschitz_holds(self):
        h1, h2 = normal_grid(0.0), normal_grid(0.2)
        s = find_s_params([h1, h2], 0.5)
        result = check_quantile_lipschitz(h1, h2, s, 0.5)
        self.assertTrue(result.passed)
        self.assertAlmostEqual(result.lhs, 0.2, delta=0.01)

    def test_precondition_names_failed_predicate(self):
        s = SParams(K=0.5, delta=1e-3, eps=0.01)
        with self.assertRaises(PreconditionError) as ctx:
            check_quantile_lipschitz(normal_grid(), normal_grid(0.1), s, 0.5)
        self.assertEqual(ctx.exception.predicate, "tail_mass")


if __name__ == '__main__':
    unittest.main()
