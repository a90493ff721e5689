import unittest

import numpy as np
from scipy import stats

from covadj import simulate
from covadj.data_types import AdjustKind, Adjustment, DesignKind, Method, SelectionMethod, Structure
from covadj.errors import CovAdjError, StudyAbortedError
from covadj.gee import moment_correlation, split_clusters
from covadj.pipeline import build_cells
from covadj.regression import fit_model, residuals

from .fixtures import SLOW


def small_cells():
    return build_cells([Method.APPROX_EXACT, Method.CMM], [Adjustment.none()],
                       [Structure.INDEPENDENCE])


def flaky_analyze(data, cells, seed, permutations, alpha):
    """Every cell fails on every replicate."""
    return [(None, 0, "singular") for _ in cells]


def uniform_analyze(data, cells, seed, permutations, alpha):
    """A valid test: p-values uniform on (0, 1)."""
    rng = np.random.default_rng(seed)
    return [(rng.uniform() < alpha, 0, None) for _ in cells]


def by_cell(report):
    return {(c.method, c.adjustment): c for c in report.cells}


def paired_se(one, two):
    return np.sqrt(one.mc_se ** 2 + two.mc_se ** 2)


class TestDesigns(unittest.TestCase):

    def test_named_designs(self):
        names = simulate.list_designs()
        self.assertEqual(len(names), 8)
        self.assertIn("indep-null", names)
        self.assertIn("clustered-high-alt", names)
        with self.assertRaisesRegex(CovAdjError, "Available designs"):
            simulate.named_design("nope")

    def test_overrides(self):
        design = simulate.named_design("clustered-null", seed=4, n_per_arm=25, cluster_size=6)
        self.assertEqual((design.n_per_arm, design.cluster_size, design.seed), (25, 6, 4))
        self.assertIs(design.kind, DesignKind.CLUSTERED)

    def test_text_round_trip(self):
        design = simulate.named_design("clustered-high-alt", seed=3)
        self.assertEqual(simulate.design_from_text(simulate.design_to_text(design)), design)
        with self.assertRaises(CovAdjError):
            simulate.design_from_text("kind=independent\ncolour=blue\n")

    def test_cross_validation_folds(self):
        # independent designs use one fold per ten units, clustered ones five folds
        self.assertEqual(simulate.named_design("indep-null").cv_folds, 2)
        self.assertEqual(simulate.named_design("indep-alt", n_per_arm=15).cv_folds, 3)
        self.assertEqual(simulate.named_design("indep-misspec-null", n_per_arm=100).cv_folds, 20)
        self.assertEqual(simulate.named_design("clustered-null", n_per_arm=50).cv_folds, 5)
        self.assertEqual(simulate.named_design("indep-null", cv_folds=4).cv_folds, 4)
        self.assertEqual(simulate.design_folds("n/10", 3), 2)
        self.assertIsNone(simulate.design_folds(None, 10))
        with self.assertRaises(CovAdjError):
            simulate.design_folds("n/0", 10)
        with self.assertRaises(CovAdjError):
            simulate.design_folds("ten", 10)
        design = simulate.design_from_text(
            "kind=independent\nn_per_arm=30\neta=1,0,1,1,0.2,0.2,0.2\nerror_var=1.1\n"
            "cv_folds=n/10\n")
        self.assertEqual(design.cv_folds, 6)

    def test_covariances_positive_definite(self):
        self.assertGreater(np.linalg.eigvalsh(simulate.independent_log_covariance()).min(), 0)
        self.assertGreater(np.linalg.eigvalsh(simulate.cluster_log_covariance()).min(), 0)

    def test_expected_calibration(self):
        self.assertAlmostEqual(simulate.expected_r2(simulate.named_design("indep-null")),
                               0.73, delta=0.03)
        self.assertAlmostEqual(simulate.expected_icc(simulate.named_design("clustered-null")),
                               0.05, delta=0.01)
        self.assertAlmostEqual(
            simulate.expected_icc(simulate.named_design("clustered-high-null")), 0.5)
        with self.assertRaises(CovAdjError):
            simulate.expected_r2(simulate.named_design("indep-misspec-null"))

    def test_prespecified(self):
        adj = simulate.prespecified(DesignKind.INDEPENDENT, "correct")
        self.assertEqual(adj.columns, simulate.OUTCOME_TERMS[DesignKind.INDEPENDENT])
        with self.assertRaises(CovAdjError):
            simulate.prespecified(DesignKind.CLUSTERED, "other")

    def test_cluster_configs(self):
        base = simulate.named_design("clustered-null")
        designs = simulate.cluster_config_designs(base, "large-clusters")
        self.assertEqual(len(designs), 6)
        self.assertEqual({d.cluster_size for d in designs}, {20, 30})


class TestGenerators(unittest.TestCase):

    def test_independent(self):
        design = simulate.named_design("indep-null", seed=1)
        ds = simulate.generate(design)
        self.assertEqual((ds.n, ds.p, ds.allocation), (20, 25, (10, 10)))
        self.assertTrue(ds.is_scalar)
        y, X, _, _ = ds.stacked()
        self.assertTrue(np.all(X > 0))
        again, _, _, _ = simulate.generate(design).stacked()
        np.testing.assert_array_equal(y, again)
        other, _, _, _ = simulate.generate(design, seed=2).stacked()
        self.assertFalse(np.array_equal(y, other))

    def test_misspecified_changes_outcome(self):
        linear = simulate.generate(simulate.named_design("indep-null", seed=5))
        curved = simulate.generate(simulate.named_design("indep-misspec-null", seed=5))
        np.testing.assert_array_equal(linear.stacked()[1], curved.stacked()[1])
        self.assertFalse(np.allclose(linear.stacked()[0], curved.stacked()[0]))

    def test_clustered(self):
        design = simulate.named_design("clustered-null", seed=2, cluster_size=5)
        ds = simulate.generate(design)
        self.assertEqual(ds.n, 20)
        np.testing.assert_array_equal(ds.sizes, 5)
        for c in ds.clusters:
            # covariates 1-10 are cluster level
            np.testing.assert_array_equal(c.covariates[:, :10], np.tile(c.covariates[0, :10],
                                                                        (5, 1)))

    def test_variable_sizes_and_shift(self):
        design = simulate.named_design("clustered-null", seed=3)._replace(
            cluster_size_range=(4, 8), size_shift=2)
        ds = simulate.generate(design)
        A = ds.assignment()
        self.assertTrue(np.all(ds.sizes[A == 0] >= 4) and np.all(ds.sizes[A == 0] <= 8))
        self.assertTrue(np.all(ds.sizes[A == 1] >= 6) and np.all(ds.sizes[A == 1] <= 10))

    def test_kind_mismatch(self):
        with self.assertRaises(CovAdjError):
            simulate.gen_clustered(simulate.named_design("indep-null"))

    def _log_covariates(self, n_per_arm, seed):
        ds = simulate.generate(simulate.named_design("indep-null", seed=seed,
                                                     n_per_arm=n_per_arm))
        y, X, A, _ = ds.stacked()
        return y, X, A

    def test_independent_covariate_shape(self):
        _, X, _ = self._log_covariates(10000, seed=8)
        logs = np.log(X)
        self.assertAlmostEqual(np.corrcoef(logs[:, 0], logs[:, 1])[0, 1], 0.5, delta=0.03)
        self.assertAlmostEqual(np.corrcoef(logs[:, 0], logs[:, 10])[0, 1], 0.2, delta=0.03)
        self.assertLess(abs(stats.skew(logs[:, 0])), 0.1)
        self.assertGreater(stats.skew(X[:, 0]), 1.)

    def _cluster_alpha(self, name, seed, n_per_arm, **overrides):
        design = simulate.named_design(name, seed=seed, n_per_arm=n_per_arm, **overrides)
        ds = simulate.generate(design)
        model = fit_model(ds, simulate.OUTCOME_TERMS[DesignKind.CLUSTERED], True)
        resid = residuals(model, ds)
        _, alpha = moment_correlation(split_clusters(ds, resid), model.n_params)
        return alpha

    def test_no_cluster_effect_gives_no_correlation(self):
        alpha = self._cluster_alpha("clustered-null", seed=9, n_per_arm=1000, rho=0.)
        self.assertLess(abs(alpha), 0.01)

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_true_model_r2(self):
        design = simulate.named_design("indep-null", seed=6, n_per_arm=5000)
        ds = simulate.generate(design)
        model = fit_model(ds, simulate.OUTCOME_TERMS[DesignKind.INDEPENDENT], True)
        self.assertAlmostEqual(model.r2, 0.73, delta=0.03)

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_independent_null_arms_match(self):
        y, X, A = self._log_covariates(50000, seed=10)
        logs = np.log(X)
        self.assertAlmostEqual(np.corrcoef(logs[:, 0], logs[:, 1])[0, 1], 0.5, delta=0.01)
        self.assertLess(abs(stats.skew(logs[:, 0])), 0.05)
        self.assertGreater(stats.skew(X[:, 0]), 1.)
        self.assertGreater(stats.ks_2samp(y[A == 1], y[A == 0]).pvalue, 0.01)

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_empirical_intracluster_correlation(self):
        # lognormal tails bias the moment estimate, so the bounds are loose
        low = self._cluster_alpha("clustered-null", seed=11, n_per_arm=2000)
        self.assertTrue(0.02 < low < 0.2, low)
        high = self._cluster_alpha("clustered-high-null", seed=12, n_per_arm=2000)
        self.assertGreater(high, 0.25)
        self.assertLess(low, high)


class TestDefaultCells(unittest.TestCase):

    def test_independent(self):
        cells = simulate.default_cells(simulate.named_design("indep-null"))
        self.assertEqual(len(cells), 5 * 6)
        labels = {c.adjustment.label for c in cells}
        self.assertNotIn(SelectionMethod.FORWARD_BICN.value, labels)
        self.assertTrue(all(not c.adjustment.whiten for c in cells))
        lasso = [c for c in cells if c.adjustment.selection is SelectionMethod.ADAPTIVE_LASSO]
        self.assertTrue(lasso)
        self.assertTrue(all(c.adjustment.cv_folds == 2 for c in lasso))

    def test_clustered(self):
        cells = simulate.default_cells(simulate.named_design("clustered-null"),
                                       methods=[Method.EXACT])
        self.assertEqual(len(cells), 7 * 2)
        self.assertTrue(any(c.adjustment.whiten for c in cells))


class TestMonteCarlo(unittest.TestCase):

    def test_worker_count_does_not_matter(self):
        design = simulate.named_design("indep-alt", seed=11)
        one = simulate.monte_carlo_study(design, small_cells(), 6, permutations=50, workers=1,
                                         chunk_size=2, smoke=True)
        two = simulate.monte_carlo_study(design, small_cells(), 6, permutations=50, workers=2,
                                         chunk_size=4, smoke=True)
        self.assertEqual(one.to_records(), two.to_records())
        self.assertEqual(len(one.cells), 2)
        self.assertEqual(one.cells[0].replicates, 6)

    def test_few_replicates_need_smoke_run(self):
        design = simulate.named_design("indep-null", seed=1)
        with self.assertRaisesRegex(CovAdjError, "at least 100 replicates"):
            simulate.monte_carlo_study(design, small_cells()[:1], 99, permutations=20)
        with self.assertLogs("covadj.simulate", level="WARNING"):
            report = simulate.monte_carlo_study(design, small_cells()[:1], 2, permutations=20,
                                                smoke=True)
        self.assertTrue(0. <= report.cells[0].rejection_rate <= 1.)

    def test_bad_arguments(self):
        design = simulate.named_design("indep-null")
        with self.assertRaises(CovAdjError):
            simulate.monte_carlo_study(design, small_cells(), 0)
        with self.assertRaises(CovAdjError):
            simulate.monte_carlo_study(design, small_cells(), 5, alpha=1.5)

    def test_abort_on_errors(self):
        design = simulate.named_design("indep-null")
        with self.assertRaises(StudyAbortedError) as ctx:
            simulate.monte_carlo_study(design, small_cells(), 3, analyze=flaky_analyze,
                                       smoke=True)
        self.assertEqual(len(ctx.exception.diagnostics), 2)

    def test_summarize(self):
        cells = small_cells()
        replicates = [[(True, 2, None), (False, 0, None)],
                      [(False, 4, None), (False, 0, None)]]
        summaries = simulate.summarize(cells, replicates, 2)
        self.assertEqual(summaries[0].rejection_rate, 0.5)
        self.assertEqual(summaries[0].mean_selected, 3.)
        self.assertAlmostEqual(summaries[0].mc_se, np.sqrt(0.25 / 2))
        self.assertEqual(summaries[1].rejection_rate, 0.)

    def test_valid_test_rejects_at_level(self):
        design = simulate.named_design("indep-null", seed=31)
        report = simulate.monte_carlo_study(design, small_cells()[:1], 2000, alpha=0.05,
                                            analyze=uniform_analyze)
        cell = report.cells[0]
        self.assertLess(abs(cell.rejection_rate - 0.05), 3 * np.sqrt(0.05 * 0.95 / 2000))
        self.assertEqual(cell.errors, 0)

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_model_based_test_inflated_by_selection(self):
        design = simulate.named_design("indep-null", seed=2025)
        aic = Adjustment(AdjustKind.SELECT, "aic", selection=SelectionMethod.FORWARD_AIC)
        cells = build_cells([Method.CMM], [aic], [Structure.INDEPENDENCE])
        report = simulate.monte_carlo_study(design, cells, 2000, workers=4)
        self.assertGreaterEqual(report.cells[0].rejection_rate, 0.15)

        large = simulate.named_design("indep-null", seed=2026, n_per_arm=100)
        correct = simulate.prespecified(DesignKind.INDEPENDENT, "correct")
        cells = build_cells([Method.CMM], [correct], [Structure.INDEPENDENCE])
        report = simulate.monte_carlo_study(large, cells, 2000, workers=4)
        self.assertTrue(0.03 <= report.cells[0].rejection_rate <= 0.07, report.cells[0])

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_augmented_test_inflated_by_selection(self):
        design = simulate.named_design("indep-null", seed=2027)
        cells = simulate.default_cells(design, methods=[Method.AUGMENTED])
        rates = by_cell(simulate.monte_carlo_study(design, cells, 2000, workers=4))
        for label in ("aic", "bicm"):
            self.assertTrue(0.30 <= rates["augmented", label].rejection_rate <= 0.60,
                            rates["augmented", label])
        self.assertTrue(0.09 <= rates["augmented", "alasso"].rejection_rate <= 0.25,
                        rates["augmented", "alasso"])
        self.assertGreaterEqual(rates["augmented", "correct"].rejection_rate, 0.08)

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_power_ordering(self):
        for n_per_arm, seed in ((10, 2028), (15, 2029)):
            design = simulate.named_design("indep-alt", seed=seed, n_per_arm=n_per_arm)
            cells = simulate.default_cells(design, methods=[Method.APPROX_EXACT, Method.EXACT])
            rates = by_cell(simulate.monte_carlo_study(design, cells, 1000, permutations=1000,
                                                       workers=4))
            for label in ("unadjusted", "aic", "bicm", "alasso"):
                exact, approx = rates["exact", label], rates["approx-exact", label]
                self.assertGreaterEqual(exact.rejection_rate,
                                        approx.rejection_rate - 2 * paired_se(exact, approx))
            unadjusted = rates["exact", "unadjusted"]
            for label in ("bicm", "alasso"):
                self.assertGreater(rates["exact", label].rejection_rate,
                                   unadjusted.rejection_rate, (n_per_arm, label))
            if n_per_arm == 10:
                aic = rates["exact", "aic"]
                self.assertLess(aic.rejection_rate,
                                unadjusted.rejection_rate + 2 * paired_se(aic, unadjusted))

    @unittest.skipUnless(SLOW, "set COVADJ_SLOW to run")
    def test_exact_test_holds_level_under_selection(self):
        design = simulate.named_design("indep-null", seed=2024)
        adjustments = [Adjustment(AdjustKind.SELECT, m.value, selection=m)
                       for m in (SelectionMethod.FORWARD_AIC, SelectionMethod.FORWARD_BICM,
                                 SelectionMethod.ADAPTIVE_LASSO)]
        cells = build_cells([Method.EXACT], adjustments, [Structure.INDEPENDENCE])
        report = simulate.monte_carlo_study(design, cells, 2000, permutations=1000, workers=4)
        for cell in report.cells:
            self.assertTrue(0.035 <= cell.rejection_rate <= 0.065, cell)


if __name__ == '__main__':
    unittest.main()
