# -*- coding: utf-8 -*-
# file: test_propensity.py

import numpy as np
import pytest
from scipy.special import expit

from extarm.crossfit import CrossFitPlan
from extarm.data_model import CovariateTable, PooledSample
from extarm.errors import ConfigError, DegenerateCohortError, SeparationWarning
from extarm.propensity import (PROBABILITY_CLIP, fit_logistic_irls, fit_propensity, penalized_gradient,
                               penalized_loss)


class TestIrls:

    def test_reaches_stationary_point(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(500, 3))
        y = (rng.random(500) < expit(0.3 + z @ np.array([1.0, -0.5, 0.0]))).astype(float)
        fit = fit_logistic_irls(z, y, lam=0.01)
        assert fit.converged
        assert np.max(np.abs(penalized_gradient(fit.beta, z, y, 0.01))) <= 1e-8

    def test_recovers_coefficients(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(20000, 2))
        truth = np.array([-0.5, 1.0, -1.0])
        y = (rng.random(20000) < expit(truth[0] + z @ truth[1:])).astype(float)
        fit = fit_logistic_irls(z, y, lam=1e-4)
        assert np.allclose(fit.beta, truth, atol=0.08)

    def test_intercept_is_not_penalized(self):
        z = np.zeros((10, 1))
        y = np.r_[np.ones(8), np.zeros(2)]
        fit = fit_logistic_irls(z, y, lam=100.0)
        assert expit(fit.intercept) == pytest.approx(0.8, abs=1e-8)

    def test_loss_is_finite_at_extreme_scores(self):
        z = np.array([[1000.0], [-1000.0]])
        y = np.array([1.0, 0.0])
        assert np.isfinite(penalized_loss(np.array([0.0, 5.0]), z, y, 1.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(200, 3))
        y = (rng.random(200) < 0.4).astype(float)
        beta = rng.normal(size=4)
        step = 1e-6
        numeric = np.array([(penalized_loss(beta + step * e, z, y, 0.3) - penalized_loss(beta - step * e, z, y, 0.3))
                            / (2 * step) for e in np.eye(4)])
        assert penalized_gradient(beta, z, y, 0.3) == pytest.approx(numeric, abs=1e-7)


class TestFitPropensity:

    def test_out_of_fold_scores_are_clipped_probabilities(self, pooled, plan):
        model, oof = fit_propensity(pooled, plan)
        assert oof.shape == (pooled.n,)
        assert np.all((oof >= PROBABILITY_CLIP) & (oof <= 1 - PROBABILITY_CLIP))
        assert oof[pooled.treated].mean() > oof[pooled.control].mean()
        assert model.lam in model.lambda_grid

    def test_deterministic_under_seed(self, pooled, plan):
        _, first = fit_propensity(pooled, plan)
        _, second = fit_propensity(pooled, plan)
        assert np.array_equal(first, second)

    def test_thread_count_does_not_change_result(self, pooled, plan):
        _, serial = fit_propensity(pooled, plan)
        _, threaded = fit_propensity(pooled, CrossFitPlan(plan.outer_folds, plan.inner_folds, plan.seed, n_jobs=3))
        assert np.array_equal(serial, threaded)

    def test_single_lambda_skips_cv(self, pooled, plan):
        model, _ = fit_propensity(pooled, plan, lambda_grid=[0.5])
        assert model.fold_lambdas == (0.5, 0.5, 0.5)
        assert model.cv_scores["final"] == []

    def test_handles_missing_covariates(self, make_pooled, plan):
        sample = make_pooled(missing_rate=0.15, seed=8)
        _, oof = fit_propensity(sample, plan)
        assert np.all(np.isfinite(oof))

    def test_summary_exports_audit_fields(self, pooled, plan):
        model, _ = fit_propensity(pooled, plan)
        summary = model.summary()
        assert set(summary["coefficients"]) == {"x1", "x2", "x3"}
        assert len(summary["fold_assignment"]) == pooled.n

    def test_perfect_separation_falls_back(self, plan, monkeypatch):
        # standardized features cap the separating coefficient; lower the threshold to reach it
        monkeypatch.setattr("extarm.propensity.SEPARATION_COEF", 1.0)
        x = np.r_[np.linspace(5, 6, 30), np.linspace(-6, -5, 60)]
        sample = PooledSample(CovariateTable.from_array(("x",), x[:, None]),
                              np.r_[np.ones(30), np.zeros(60)].astype(int),
                              np.zeros(90), [f"s{i}" for i in range(90)])
        with pytest.warns(SeparationWarning):
            model, _ = fit_propensity(sample, plan, lambda_grid=[1e-4, 10.0])
        assert model.final.separated
        assert model.lam == 10.0

    def test_overlapping_cohorts_are_not_separated(self, pooled, plan):
        model, _ = fit_propensity(pooled, plan)
        assert not model.final.separated

    def test_rejects_bad_grid(self, pooled, plan):
        with pytest.raises(ConfigError):
            fit_propensity(pooled, plan, lambda_grid=[])
        with pytest.raises(ConfigError):
            fit_propensity(pooled, plan, lambda_grid=[0.0, 1.0])

    def test_scores_ignore_covariate_units(self, pooled, plan):
        _, reference = fit_propensity(pooled, plan)
        values = pooled.covariates.values * np.array([10.0, 1.0, 1.0])
        rescaled = pooled.with_covariates(CovariateTable.from_array(pooled.covariates.names, values))
        _, oof = fit_propensity(rescaled, plan)
        assert oof == pytest.approx(reference, rel=1e-6, abs=1e-9)

    def test_arm_smaller_than_fold_count(self, make_pooled):
        sample = make_pooled(n1=4, n0=50)
        with pytest.raises(DegenerateCohortError):
            fit_propensity(sample, CrossFitPlan(outer_folds=5))
# file: test_propensity.py
