# -*- coding: utf-8 -*-
# file: test_preprocessing.py

import numpy as np
import pytest

from extarm.data_model import CovariateTable
from extarm.errors import ConfigError, ConstantColumnWarning, DataValidationError
from extarm.preprocessing import apply_feature_map, fit_imputer, fit_preprocessor, fit_standardizer


class TestImputer:

    def test_observed_cells_pass_through(self, make_pooled):
        table = make_pooled(missing_rate=0.2, seed=4).covariates
        filled = fit_imputer(table).transform(table)
        observed = ~table.missing
        assert np.array_equal(filled[observed], table.values[observed])
        assert np.all(np.isfinite(filled))

    def test_recovers_correlated_column(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=400)
        b = 2.0 * a + 0.05 * rng.normal(size=400)
        b_obs = b.copy()
        b_obs[:40] = np.nan
        table = CovariateTable.from_array(("a", "b"), np.column_stack([a, b_obs]))
        filled = fit_imputer(table).transform(table)
        assert np.max(np.abs(filled[:40, 1] - b[:40])) < 0.5

    def test_no_missing_leaves_table_unchanged(self):
        table = CovariateTable.from_columns({"a": [1.0, 2.0, 3.0], "b": [0.0, 1.0, 0.0]})
        state = fit_imputer(table)
        assert state.steps == ()
        assert np.array_equal(state.transform(table), table.values)

    def test_random_order_is_seeded(self, make_pooled):
        table = make_pooled(d=5, missing_rate=0.1, seed=2).covariates
        assert fit_imputer(table, seed=9, order="random").order == fit_imputer(table, seed=9, order="random").order

    def test_column_without_observations_in_subset(self):
        table = CovariateTable.from_columns({"a": [1.0, 2.0, 3.0], "b": [None, None, 4.0]})
        with pytest.raises(DataValidationError):
            fit_imputer(table.take(np.array([0, 1])))

    def test_unknown_order(self):
        table = CovariateTable.from_columns({"a": [1.0, 2.0]})
        with pytest.raises(ConfigError):
            fit_imputer(table, order="descending")


class TestStandardizer:

    def test_zero_mean_unit_sd(self, pooled):
        pre = fit_preprocessor(pooled.covariates)
        z = pre.transform(pooled.covariates)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0)

    def test_constant_column_dropped_with_warning(self):
        matrix = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
        with pytest.warns(ConstantColumnWarning):
            std = fit_standardizer(matrix, ("a", "b"), warn=True)
        assert std.kept_names == ("a",)
        assert std.transform(matrix).shape == (5, 1)

    def test_squared_feature_map(self):
        assert apply_feature_map(np.array([[-2.0, 3.0]]), "squared").tolist() == [[4.0, 9.0]]
        with pytest.raises(ConfigError):
            apply_feature_map(np.zeros((1, 1)), "cubic")

    def test_squared_preprocessor_names(self, pooled):
        pre = fit_preprocessor(pooled.covariates, features="squared")
        assert pre.standardizer.kept_names == ("x1^2", "x2^2", "x3^2")
# file: test_preprocessing.py
