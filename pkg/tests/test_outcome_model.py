# -*- coding: utf-8 -*-
# file: test_outcome_model.py

import numpy as np
import pytest

from extarm.crossfit import CrossFitPlan
from extarm.data_model import CovariateTable, LongitudinalRecord, PooledSample, compute_velocities
from extarm.errors import ConfigError, EstimationError, ZeroVarianceWarning
from extarm.outcome_model import OutcomeRows, estimate_rho0, fit_outcome


class TestOutcomeRows:

    def test_from_controls_direct_target(self, pooled):
        rows = OutcomeRows.from_controls(pooled, velocity=False)
        assert rows.n_rows == pooled.n0
        assert np.array_equal(rows.target, pooled.outcome[pooled.control])

    def test_velocity_needs_baseline_and_time(self, pooled):
        with pytest.raises(ConfigError):
            OutcomeRows.from_controls(pooled, velocity=True)

    def test_velocity_target(self, tiny_sample):
        sample = PooledSample(tiny_sample.covariates, tiny_sample.treatment, tiny_sample.outcome,
                              tiny_sample.subject_id, baseline=np.full(7, 1.0), elapsed=np.full(7, 2.0))
        rows = OutcomeRows.from_controls(sample, velocity=True)
        assert rows.target.tolist() == [0.5, 1.5, 2.5, 3.5]

    def test_copies_collapse_to_one_group(self, tiny_sample):
        boot = tiny_sample.take(np.array([0, 1, 2, 3, 3, 4, 5]))
        rows = OutcomeRows.from_controls(boot, velocity=False)
        assert rows.groups.tolist() == ["c1", "c1", "c2", "c3"]
        assert rows.n_subjects == 3


class TestFitOutcome:

    def test_out_of_fold_predictions_track_truth(self, pooled, plan):
        rows = OutcomeRows.from_controls(pooled, velocity=False)
        model, oof = fit_outcome(rows, plan)
        x = pooled.covariates.values[pooled.control]
        assert np.corrcoef(oof, x.sum(axis=1))[0, 1] > 0.9
        assert model.kind == "ridge"

    def test_training_rows_scored_out_of_fold(self, pooled, plan):
        rows = OutcomeRows.from_controls(pooled, velocity=False)
        model, oof = fit_outcome(rows, plan)
        mu0 = model.predict_mu0(pooled)
        assert np.allclose(mu0[pooled.control], oof)

    def test_fresh_rows_get_fold_average(self, pooled, plan):
        rows = OutcomeRows.from_controls(pooled, velocity=False)
        model, _ = fit_outcome(rows, plan)
        treated = pooled.covariates.take(np.flatnonzero(pooled.treated))
        expected = np.mean([f.predict_target(treated) for f in model.folds], axis=0)
        assert np.allclose(model.predict_mu0(pooled)[pooled.treated], expected)
        assert np.all(model.scoring_folds(pooled.subject_id[pooled.treated]) == -1)

    def test_knn_with_explicit_grid(self, pooled, plan):
        rows = OutcomeRows.from_controls(pooled, velocity=False)
        model, _ = fit_outcome(rows, plan, kind="knn", hyper_grid=[{"k": 5}, {"k": 15}])
        assert all(f.params["k"] in (5, 15) for f in model.folds)

    def test_velocity_model_predicts_endpoint(self, plan):
        rng = np.random.default_rng(3)
        n = 60
        age = rng.normal(60, 8, n)
        records = [LongitudinalRecord(f"h{i}", 0.0, 30.0, ((180.0, 30.0 - 0.01 * age[i] * 180.0),
                                                            (365.0, 30.0 - 0.01 * age[i] * 365.0)), i)
                   for i in range(n)]
        table = compute_velocities(records, horizon=365.0)
        covariates = CovariateTable.from_array(("age",), age[:, None])
        rows = OutcomeRows.from_velocity_table(table, covariates)
        model, _ = fit_outcome(rows, plan, hyper_grid=[{"alpha": 1e-6}])
        fresh = CovariateTable.from_array(("age",), np.array([[50.0], [70.0]]))
        predicted = model.predict_outcome(fresh, baseline=np.array([30.0, 30.0]), elapsed=np.array([365.0, 365.0]))
        assert predicted == pytest.approx([30.0 - 0.5 * 365.0, 30.0 - 0.7 * 365.0], rel=1e-3)

    def test_too_few_subjects(self, tiny_sample):
        rows = OutcomeRows.from_controls(tiny_sample, velocity=False)
        with pytest.raises(EstimationError):
            fit_outcome(rows, CrossFitPlan(outer_folds=5))

    def test_empty_grid(self, pooled, plan):
        with pytest.raises(ConfigError):
            fit_outcome(OutcomeRows.from_controls(pooled, velocity=False), plan, hyper_grid=[])


class TestRho0:

    def test_perfect_predictions(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        assert estimate_rho0(y * 2.0, y) == pytest.approx(1.0)

    def test_constant_predictions_give_zero(self):
        with pytest.warns(ZeroVarianceWarning):
            assert estimate_rho0(np.ones(5), np.arange(5.0)) == 0.0

    def test_needs_three_rows(self):
        with pytest.raises(EstimationError):
            estimate_rho0(np.arange(2.0), np.arange(2.0))
# file: test_outcome_model.py
