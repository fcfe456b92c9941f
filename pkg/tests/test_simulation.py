# -*- coding: utf-8 -*-
# file: test_simulation.py

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from extarm.bootstrap import bootstrap_variance
from extarm.crossfit import CrossFitPlan
from extarm.errors import ConfigError, DgpError
from extarm.pipeline import EstimatorSpec
from extarm.power_design import PowerSpec, aipw_power
from extarm.simulation import (DgpSpec, beta_resample, generate_pooled, mc_table, oracle_att,
                               resample_probabilities, run_mc, sweep_beta)

N_ORACLE = 100_000

# Shift and outcome surface share a direction, so matching on the score also matches mu0
ALIGNED_SHIFT = [0.4, 0.3, 0.2, 0.1, 0.0]
ALIGNED_DGP = DgpSpec(d=5, mean_shift=ALIGNED_SHIFT, outcome_coef=[2 * s for s in ALIGNED_SHIFT],
                      n1=200, n0=1000, tau=1.0, noise_sd=1.0)


@pytest.fixture
def small_dgp():
    return DgpSpec(d=2, mean_shift=[0.4, 0.2], n1=100, n0=300, tau=1.0)


@pytest.fixture
def sim_spec():
    return EstimatorSpec(plan=CrossFitPlan(outer_folds=3, inner_folds=2, seed=5))


class TestDgpSpec:

    def test_defaults_expand_to_vectors(self):
        spec = DgpSpec(d=3)
        assert spec.outcome_coef.tolist() == [1.0, 1.0, 1.0]
        assert np.array_equal(spec.covariance, np.eye(3))
        assert not spec.heterogeneous

    def test_from_mapping_and_record(self):
        spec = DgpSpec.from_mapping({"d": 2, "mean_shift": [0.5, 0.0], "tau": 0.0})
        record = spec.to_record()
        assert record["mean_shift"] == [0.5, 0.0]
        assert record["covariance"] == [[1.0, 0.0], [0.0, 1.0]]

    @pytest.mark.parametrize("kwargs", [
        {"d": 0},
        {"d": 2, "mean_shift": [1.0]},
        {"d": 2, "covariance": [[1.0, 2.0], [2.0, 1.0]]},
        {"noise_sd": -1.0},
        {"assignment": "stratified"},
        {"nonlinearity": "cubic"},
        {"n1": 1},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(DgpError):
            DgpSpec(**kwargs)

    def test_unknown_field(self):
        with pytest.raises(TypeError):
            DgpSpec.from_mapping({"dimension": 3})


class TestGeneratePooled:

    def test_noise_free_effect_is_exact(self):
        pool = generate_pooled(DgpSpec(d=2, noise_sd=0.0, tau=2.0, n1=20, n0=40), seed=1)
        treated = pool.sample.treated
        assert np.allclose(pool.y1[treated] - pool.y0[treated], 2.0)
        assert np.allclose(pool.sample.outcome[treated] - pool.mu0_true[treated], 2.0)

    def test_null_effect_without_shift(self):
        pool = generate_pooled(DgpSpec(d=2, tau=0.0, n1=3000, n0=3000), seed=2)
        y = pool.sample.outcome
        assert abs(y[pool.sample.treated].mean() - y[pool.sample.control].mean()) < 0.15

    def test_logistic_assignment_rate(self):
        spec = DgpSpec(d=2, assignment="logistic", n=20000, logistic_intercept=-1.0)
        pool = generate_pooled(spec, seed=3)
        assert pool.sample.treatment.mean() == pytest.approx(expit(-1.0), abs=0.015)

    def test_true_propensity_of_two_populations(self, small_dgp):
        pool = generate_pooled(small_dgp, seed=4)
        assert pool.e_true.mean() == pytest.approx(100 / 400, abs=0.03)
        assert pool.e_true[pool.sample.treated].mean() > pool.e_true[pool.sample.control].mean()

    def test_seed_reproducible(self, small_dgp):
        assert generate_pooled(small_dgp, seed=9).sample.equals(generate_pooled(small_dgp, seed=9).sample)

    def test_quadratic_surface(self):
        spec = DgpSpec(d=1, nonlinearity="quadratic", outcome_intercept=1.0)
        assert spec.outcome_mean(np.array([[2.0]])).tolist() == [1.0 + 2.0 + 2.0]


class TestOracleAtt:

    def test_constant_effect(self, small_dgp):
        assert oracle_att(small_dgp, n_oracle=N_ORACLE) == 1.0

    def test_zero_effect(self):
        assert oracle_att(DgpSpec(d=2, tau=0.0), n_oracle=N_ORACLE) == 0.0

    def test_heterogeneous_effect_uses_treated_covariates(self):
        spec = DgpSpec(d=2, tau=0.0, effect_coef=[1.0, 0.0], mean_shift=[0.5, 0.0])
        assert oracle_att(spec, n_oracle=200_000) == pytest.approx(0.5, abs=0.02)

    def test_needs_enough_draws(self, small_dgp):
        with pytest.raises(ConfigError):
            oracle_att(small_dgp, n_oracle=1000)


class TestRunMc:

    def test_oracle_nuisances(self, small_dgp, sim_spec):
        results = run_mc(small_dgp, sim_spec, reps=100, seed=1, propensity_mode="oracle",
                         outcome_mode="oracle", n_oracle=N_ORACLE)
        assert list(results) == ["PSM", "IPW", "OM", "AIPW"]
        for result in results.values():
            assert result.reps == 100
            assert result.oracle == 1.0
            assert abs(result.bias) < 5 * result.mc_se + 0.05
            assert 0.8 <= result.coverage95 <= 1.0

    def test_repeatable(self, small_dgp, sim_spec):
        spec = EstimatorSpec(methods=("OM",), plan=sim_spec.plan)
        first = run_mc(small_dgp, spec, reps=100, seed=3, outcome_mode="oracle", n_oracle=N_ORACLE)
        threaded = EstimatorSpec(methods=("OM",), plan=CrossFitPlan(3, 2, seed=5, n_jobs=4))
        second = run_mc(small_dgp, threaded, reps=100, seed=3, outcome_mode="oracle", n_oracle=N_ORACLE)
        assert first["OM"].to_record() == second["OM"].to_record()

    def test_table_has_variance_ratio(self, small_dgp, sim_spec):
        spec = EstimatorSpec(methods=("OM",), plan=sim_spec.plan)
        table = mc_table(run_mc(small_dgp, spec, reps=100, outcome_mode="oracle", n_oracle=N_ORACLE))
        assert {"method", "bias", "coverage95", "rejection_rate", "variance_ratio"} <= set(table.columns)

    def test_rejects_few_reps_and_bad_modes(self, small_dgp, sim_spec):
        with pytest.raises(ConfigError):
            run_mc(small_dgp, sim_spec, reps=50)
        with pytest.raises(ConfigError):
            run_mc(small_dgp, sim_spec, reps=100, propensity_mode="perfect")

    @pytest.mark.monte_carlo
    def test_size_under_null(self, sim_spec):
        spec = DgpSpec(d=2, mean_shift=[0.3, 0.0], n1=200, n0=600, tau=0.0)
        aipw = EstimatorSpec(methods=("AIPW",), plan=sim_spec.plan)
        result = run_mc(spec, aipw, reps=2000, seed=11, propensity_mode="oracle", outcome_mode="oracle",
                        n_oracle=N_ORACLE)["AIPW"]
        assert result.rejection_rate == pytest.approx(0.05, abs=0.02)

    @pytest.mark.monte_carlo
    def test_om_with_true_outcome_model(self, sim_spec):
        spec = DgpSpec(d=3, mean_shift=[0.3, 0.3, 0.0], n1=150, n0=600)
        om = EstimatorSpec(methods=("OM",), plan=sim_spec.plan)
        result = run_mc(spec, om, reps=1000, seed=12, outcome_mode="oracle", n_oracle=N_ORACLE)["OM"]
        assert result.empirical_variance == pytest.approx(1.0 / 150, rel=0.15)

    @pytest.mark.monte_carlo
    def test_aipw_formula_matches_spread(self, sim_spec):
        spec = DgpSpec(d=3, mean_shift=[0.3, 0.2, 0.0], n1=200, n0=1000)
        aipw = EstimatorSpec(methods=("AIPW",), plan=sim_spec.plan)
        result = run_mc(spec, aipw, reps=500, seed=13, n_oracle=N_ORACLE)["AIPW"]
        assert 0.85 <= result.variance_ratio <= 1.15
        assert abs(result.bias) < 3 * result.mc_se


class TestBetaResample:

    def test_zero_beta_is_uniform(self):
        probs = resample_probabilities(np.array([0.1, 0.4, 0.7]), 0.0)
        assert np.allclose(probs, 1 / 3)

    def test_large_beta_concentrates_on_control_like_subjects(self):
        probs = resample_probabilities(np.array([0.1, 0.5, 0.9]), 10.0)
        assert probs[0] > 0.99

    def test_rejects_negative_beta_and_boundary_scores(self):
        with pytest.raises(ConfigError):
            resample_probabilities(np.array([0.5]), -1.0)
        with pytest.raises(DgpError):
            resample_probabilities(np.array([0.0, 0.5]), 1.0)

    def test_trial_rows_kept_and_pool_size_preserved(self, small_dgp):
        pool = generate_pooled(small_dgp, seed=6)
        resampled, rows = beta_resample(pool.sample, pool.e_true, 1.0, seed=0)
        assert resampled.n1 == pool.sample.n1
        assert resampled.n0 == pool.sample.n0
        assert np.array_equal(rows[:100], np.arange(100))
        assert set(resampled.base_ids()) <= set(pool.sample.subject_id)

    def test_large_beta_lowers_mean_score(self, small_dgp):
        pool = generate_pooled(small_dgp, seed=7)
        _, flat = beta_resample(pool.sample, pool.e_true, 0.0, seed=1)
        _, tilted = beta_resample(pool.sample, pool.e_true, 3.0, seed=1)
        assert pool.e_true[tilted[100:]].mean() < pool.e_true[flat[100:]].mean()


class TestSweepBeta:

    def test_single_beta_normalized_by_psm(self, sim_spec):
        spec = DgpSpec(d=2, mean_shift=[0.4, 0.0], n1=60, n0=180)
        table = sweep_beta(spec, [0.0], sim_spec, resamples_per_beta=2, seed=1, n_oracle=N_ORACLE)
        assert table["method"].tolist() == ["PSM", "IPW", "OM", "AIPW"]
        assert table["resamples"].tolist() == [2, 2, 2, 2]
        psm = table.loc[table["method"] == "PSM", "variance_ratio"].iloc[0]
        assert psm == pytest.approx(1.0)

    def test_grid_must_be_sorted(self, sim_spec):
        with pytest.raises(ConfigError):
            sweep_beta(DgpSpec(d=2), [1.0, 0.0], sim_spec, n_oracle=N_ORACLE)

    def test_psm_variance_reacts_to_tilted_pool(self, sim_spec):
        spec = DgpSpec(d=2, mean_shift=[0.6, 0.3], n1=60, n0=180)
        table = sweep_beta(spec, [0.0, 2.0], sim_spec, resamples_per_beta=2, seed=4, n_oracle=N_ORACLE)
        psm = table[table["method"] == "PSM"]["variance_ratio"].tolist()
        assert psm[0] == pytest.approx(1.0)
        assert psm[1] > 1.0

    def test_single_resample_ratio_is_relative_to_psm(self, sim_spec):
        spec = DgpSpec(d=2, mean_shift=[0.4, 0.0], n1=60, n0=180)
        table = sweep_beta(spec, [0.0], sim_spec, resamples_per_beta=1, seed=2, n_oracle=N_ORACLE)
        psm_variance = table.loc[table["method"] == "PSM", "mean_variance"].iloc[0]
        assert np.allclose(table["variance_ratio"], table["mean_variance"] / psm_variance)

    @pytest.mark.monte_carlo
    def test_overlap_worsens_with_beta(self, sim_spec):
        spec = DgpSpec(d=5, mean_shift=[0.4, 0.3, 0.2, 0.0, 0.0], n1=200, n0=1000)
        table = sweep_beta(spec, [0.0, 0.5, 1.0, 1.5, 2.0], sim_spec, resamples_per_beta=20, seed=3,
                           n_oracle=N_ORACLE)
        by_method = {m: group.sort_values("beta") for m, group in table.groupby("method")}
        gamma = by_method["IPW"]["mean_gamma_hat"].to_numpy()
        assert np.all(np.diff(gamma) <= 0)
        for method in ("IPW", "PSM"):
            ratio = by_method[method]["variance_ratio"].to_numpy()
            assert ratio[0] < ratio[2] < ratio[4]
        om = by_method["OM"]["variance_ratio"].to_numpy()
        assert np.all(np.abs(om / om[0] - 1.0) <= 0.2)
        bias = table.groupby("beta")["mean_abs_std_bias"].mean().to_numpy()
        assert bias[-1] >= bias[0]


class TestFormulaValidation:

    @pytest.mark.monte_carlo
    def test_formula_variances_match_spread(self, sim_spec):
        spec = replace(sim_spec, psm_form="matched")
        results = run_mc(ALIGNED_DGP, spec, reps=2000, seed=21, propensity_mode="oracle", outcome_mode="oracle",
                         n_oracle=N_ORACLE)
        for method, result in results.items():
            assert 0.85 <= result.variance_ratio <= 1.15, method
            assert abs(result.bias) < 3 * result.mc_se, method

    @pytest.mark.monte_carlo
    def test_aipw_survives_wrong_outcome_model(self, sim_spec):
        spec = replace(sim_spec, methods=("OM", "AIPW"))
        results = run_mc(ALIGNED_DGP, spec, reps=1000, seed=22, propensity_mode="oracle",
                         outcome_mode="misspecified", n_oracle=N_ORACLE)
        assert abs(results["AIPW"].bias) < 3 * results["AIPW"].mc_se
        assert abs(results["OM"].bias) > 3 * results["OM"].mc_se

    @pytest.mark.monte_carlo
    def test_aipw_survives_wrong_propensity_model(self, sim_spec):
        spec = replace(sim_spec, methods=("IPW", "AIPW"))
        results = run_mc(ALIGNED_DGP, spec, reps=1000, seed=23, propensity_mode="misspecified",
                         outcome_mode="oracle", n_oracle=N_ORACLE)
        assert abs(results["AIPW"].bias) < 3 * results["AIPW"].mc_se
        assert abs(results["IPW"].bias) > 3 * results["IPW"].mc_se


class TestCoverageAndPower:

    @pytest.mark.monte_carlo
    def test_aipw_interval_coverage(self, sim_spec):
        aipw = replace(sim_spec, methods=("AIPW",))
        result = run_mc(ALIGNED_DGP, aipw, reps=2000, seed=24, propensity_mode="oracle", outcome_mode="oracle",
                        n_oracle=N_ORACLE)["AIPW"]
        assert 0.93 <= result.coverage95 <= 0.97

    @pytest.mark.monte_carlo
    @pytest.mark.parametrize("tau, n1, n0", [(0.2, 200, 1000), (0.25, 100, 500)])
    def test_rejection_rate_follows_power_formula(self, sim_spec, tau, n1, n0):
        dgp = replace(ALIGNED_DGP, tau=tau, n1=n1, n0=n0)
        aipw = replace(sim_spec, methods=("AIPW",))
        result = run_mc(dgp, aipw, reps=2000, seed=25, propensity_mode="oracle", outcome_mode="oracle",
                        n_oracle=N_ORACLE)["AIPW"]
        gamma = math.exp(-float(np.sum(np.square(ALIGNED_SHIFT))))
        expected = aipw_power(PowerSpec(alpha=0.05, tau=tau, n1=n1, n0=n0, gamma=gamma, kappa_sq=1.0))
        assert result.rejection_rate == pytest.approx(expected, abs=0.03)


class TestEfficiencyGain:

    @pytest.mark.monte_carlo
    def test_outcome_adjustment_beats_matching(self, sim_spec):
        # gamma = exp(-|shift|^2) = 0.5; rho0^2 = 0.75^2 / (0.75^2 + 1) = 0.36
        shift = math.sqrt(math.log(2.0))
        dgp = DgpSpec(d=5, mean_shift=[shift, 0, 0, 0, 0], outcome_coef=[0, 0.75, 0, 0, 0], n1=200, n0=1000)
        sample = generate_pooled(dgp, seed=26).sample
        variances = {m: bootstrap_variance(sample, sim_spec, m, B=200, seed=27).variance
                     for m in ("PSM", "OM", "AIPW")}
        assert variances["OM"] <= 0.6 * variances["PSM"]
        assert variances["AIPW"] <= 0.6 * variances["PSM"]
# file: test_simulation.py
