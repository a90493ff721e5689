import unittest

import numpy as np

from covadj import regression
from covadj.data_types import Method
from covadj.errors import CovAdjError, RankDeficientError

from .fixtures import random_trial, trial_from_arrays


class TestOls(unittest.TestCase):

    def test_exact_line(self):
        x = np.array([0., 1., 2., 3., 4.])
        X = np.column_stack([np.ones(5), x])
        model = regression.ols_fit(X, 2 + 3 * x, selected=(0,))
        np.testing.assert_allclose(model.eta, [2., 3.], atol=1e-12)
        self.assertAlmostEqual(model.rss, 0., places=20)
        self.assertAlmostEqual(model.r2, 1., places=12)

    def test_constant_response(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(8), rng.normal(size=(8, 2))])
        model = regression.ols_fit(X, np.full(8, 4.))
        np.testing.assert_allclose(model.eta, [4., 0., 0.], atol=1e-12)
        self.assertEqual(model.r2, 0.)

    def test_normal_equations(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(5), rng.normal(size=(5, 2))])
        y = rng.normal(size=5)
        model = regression.ols_fit(X, y)
        np.testing.assert_allclose(model.eta, np.linalg.solve(X.T @ X, X.T @ y), rtol=1e-10)

    def test_scale_equivariance(self):
        ds = random_trial(n_per_arm=10, p=2, seed=7)
        y, X, _, _ = ds.stacked()
        D = np.column_stack([np.ones(len(y)), X])
        scaled = D.copy()
        scaled[:, 1] *= 1000.
        a = regression.ols_fit(D, y)
        b = regression.ols_fit(scaled, y)
        self.assertAlmostEqual(b.eta[1] * 1000., a.eta[1], places=9)
        np.testing.assert_allclose(scaled @ b.eta, D @ a.eta, rtol=1e-10)

    def test_rank_deficient_names_columns(self):
        x = np.arange(6.)
        X = np.column_stack([np.ones(6), x, 2 * x])
        with self.assertRaises(RankDeficientError) as ctx:
            regression.ols_fit(X, x, names=["(intercept)", "x1", "x1_twice"])
        self.assertEqual(len(ctx.exception.columns), 1)
        self.assertIn(ctx.exception.columns[0], ["(intercept)", "x1", "x1_twice"])

    def test_too_few_rows(self):
        with self.assertRaises(RankDeficientError):
            regression.check_rank(np.eye(3))


class TestDatasetModels(unittest.TestCase):

    def test_design_matrix(self):
        ds = trial_from_arrays([1., 2., 3.], [1, 0, 0], X=[[5., 6.], [7., 8.], [9., 1.]])
        X, y = regression.design_matrix(ds, selected=(1,), with_treatment=True)
        np.testing.assert_array_equal(X, [[1., 1., 6.], [1., 0., 8.], [1., 0., 1.]])
        np.testing.assert_array_equal(y, [1., 2., 3.])
        with self.assertRaises(CovAdjError):
            regression.design_matrix(ds, selected=(2,))

    def test_intercept_residuals(self):
        ds = random_trial(n_per_arm=6, seed=1)
        model = regression.fit_model(ds)
        y, _, _, _ = ds.stacked()
        np.testing.assert_allclose(regression.residuals(model, ds), y - y.mean(), atol=1e-12)

    def test_control_model_applied_to_all(self):
        ds = random_trial(n_per_arm=8, p=2, seed=2)
        model = regression.fit_model(ds, selected=(0, 1), arm=0)
        y, X, _, _ = ds.stacked()
        expected = y - (model.eta[0] + X @ model.eta[1:])
        np.testing.assert_allclose(regression.residuals(model, ds), expected, rtol=1e-12)
        self.assertEqual(model.n_obs, 8)

    def test_predict_fixed_treatment(self):
        ds = random_trial(n_per_arm=8, p=1, seed=3, effect=2.)
        model = regression.fit_model(ds, selected=(0,), with_treatment=True)
        diff = regression.predict(model, ds, treatment=1) - regression.predict(model, ds, 0)
        np.testing.assert_allclose(diff, model.eta[1])


class TestWald(unittest.TestCase):

    def test_reported_estimate(self):
        result = regression.wald_test(0.413, 0.064, Method.CMM)
        self.assertAlmostEqual(result.z_value, 6.453, places=3)
        self.assertLess(result.p_value, 1e-4)
        result = regression.wald_test(0.362, 0.087, Method.CMM)
        self.assertAlmostEqual(result.z_value, 4.161, places=3)

    def test_null_point(self):
        result = regression.wald_test(0., 1., Method.AUGMENTED)
        self.assertEqual(result.z_value, 0.)
        self.assertEqual(result.p_value, 1.)

    def test_normal_quantile(self):
        self.assertAlmostEqual(regression.wald_test(1.96, 1., Method.CMM).p_value, 0.05,
                               delta=5e-4)

    def test_non_positive_se(self):
        with self.assertRaises(CovAdjError):
            regression.wald_test(1., 0., Method.CMM)


if __name__ == '__main__':
    unittest.main()
