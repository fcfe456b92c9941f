# -*- coding: utf-8 -*-
# file: simulation.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Synthetic data-generating processes, brute-force ATT oracle, Monte Carlo runner and overlap resampling.

import logging
import time
from dataclasses import dataclass, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from .crossfit import CrossFitPlan, derive_seed, run_folds, spawn_seeds
from .data_model import CovariateTable, PooledSample
from .errors import ConfigError, DgpError, ExtArmError, MonteCarloFailureError
from .estimators import METHODS
from .inference import standardized_bias
from .outcome_model import OutcomeRows, fit_outcome
from .pipeline import EstimatorSpec, NuisanceFit, estimate, fit_nuisances
from .propensity import PROBABILITY_CLIP, fit_propensity

logger = logging.getLogger(__name__)

ASSIGNMENTS = ("two-population", "logistic")
NONLINEARITIES = ("none", "quadratic")
NUISANCE_MODES = ("oracle", "fitted", "misspecified")
MIN_REPS = 100
MIN_ORACLE_DRAWS = 100_000
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """
    Gaussian covariates with a shared covariance and a (possibly quadratic) outcome
    surface, Y(0) = f(X) + noise_sd * eps, Y(1) = Y(0) + tau + effect_coef'X.

    "two-population": n1 treated from N(mean_shift, S) and n0 controls from N(0, S).
    "logistic": n draws from N(0, S) with A ~ Bernoulli(expit(intercept + coef'X)).
    """
    d: int = 5
    mean_shift: Optional[Sequence[float]] = None
    covariance: Optional[np.ndarray] = None
    outcome_coef: Optional[Sequence[float]] = None
    outcome_intercept: float = 0.0
    nonlinearity: str = "none"
    noise_sd: float = 1.0
    tau: float = 1.0
    effect_coef: Optional[Sequence[float]] = None
    assignment: str = "two-population"
    n1: int = 200
    n0: int = 1000
    n: int = 1200
    logistic_coef: Optional[Sequence[float]] = None
    logistic_intercept: float = 0.0
    seed: int = 0

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise DgpError(f"Covariate count d must be >= 1, got {self.d}")

        def vector(value, default):
            out = np.full(d, default, dtype=float) if value is None else np.asarray(value, dtype=float)
            if out.shape != (d,):
                raise DgpError(f"Expected a length-{d} vector, got shape {out.shape}")
            return out

        object.__setattr__(self, "mean_shift", vector(self.mean_shift, 0.0))
        object.__setattr__(self, "outcome_coef", vector(self.outcome_coef, 1.0))
        object.__setattr__(self, "logistic_coef", vector(self.logistic_coef, 0.0))
        if self.effect_coef is not None:
            object.__setattr__(self, "effect_coef", vector(self.effect_coef, 0.0))
        cov = np.eye(d) if self.covariance is None else np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (d, d) or not np.allclose(cov, cov.T):
            raise DgpError(f"Covariance must be a symmetric {d}x{d} matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DgpError("Covariance is not positive definite") from None
        object.__setattr__(self, "covariance", cov)
        if self.noise_sd < 0:
            raise DgpError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.assignment not in ASSIGNMENTS:
            raise DgpError(f"assignment must be one of {ASSIGNMENTS}")
        if self.nonlinearity not in NONLINEARITIES:
            raise DgpError(f"nonlinearity must be one of {NONLINEARITIES}")
        if self.assignment == "two-population" and (self.n1 < 2 or self.n0 < 2):
            raise DgpError(f"two-population assignment needs n1, n0 >= 2, got {self.n1}, {self.n0}")
        if self.assignment == "logistic" and self.n < 4:
            raise DgpError(f"logistic assignment needs n >= 4, got {self.n}")

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "DgpSpec":
        return cls(**{k: v for k, v in mapping.items()})

    @property
    def heterogeneous(self) -> bool:
        return self.effect_coef is not None and bool(np.any(self.effect_coef != 0))

    def outcome_mean(self, x: np.ndarray) -> np.ndarray:
        """ mu0(x) = E[Y(0) | X = x]. """
        f = self.outcome_intercept + x @ self.outcome_coef
        if self.nonlinearity == "quadratic":
            f = f + 0.5 * (x ** 2) @ self.outcome_coef
        return f

    def effect(self, x: np.ndarray) -> np.ndarray:
        if self.effect_coef is None:
            return np.full(x.shape[0], float(self.tau))
        return self.tau + x @ self.effect_coef

    def propensity(self, x: np.ndarray) -> np.ndarray:
        """ True P(A=1 | X=x) of the pooled sample. """
        if self.assignment == "logistic":
            return expit(self.logistic_intercept + x @ self.logistic_coef)
        precision_shift = np.linalg.solve(self.covariance, self.mean_shift)
        score = (np.log(self.n1 / self.n0) + x @ precision_shift
                 - 0.5 * float(self.mean_shift @ precision_shift))
        return expit(score)

    def to_record(self) -> dict:
        record = {k: v for k, v in self.__dict__.items()}
        for k, v in record.items():
            if isinstance(v, np.ndarray):
                record[k] = v.tolist()
        return record


@dataclass(frozen=True, eq=False)
class SimulatedPool:
    """ A generated pooled sample with the quantities only a simulation can know. """
    sample: PooledSample
    e_true: np.ndarray
    mu0_true: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    @property
    def true_att(self) -> float:
        treated = self.sample.treated
        return float(np.mean(self.y1[treated] - self.y0[treated]))

    def oracle_nuisance(self) -> NuisanceFit:
        e = np.clip(self.e_true, PROBABILITY_CLIP, 1 - PROBABILITY_CLIP)
        return NuisanceFit(e_hat=e, mu0_hat=self.mu0_true, source="oracle")


def _draw_covariates(spec: DgpSpec, rng: np.random.Generator, size: int, shift: np.ndarray) -> np.ndarray:
    return rng.multivariate_normal(shift, spec.covariance, size=size, method="cholesky")


def generate_pooled(spec: DgpSpec, seed: Optional[int] = None) -> SimulatedPool:
    """ Draws one pooled sample; `seed` overrides spec.seed. """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.assignment == "two-population":
        x = np.vstack([_draw_covariates(spec, rng, spec.n1, spec.mean_shift),
                       _draw_covariates(spec, rng, spec.n0, np.zeros(spec.d))])
        a = np.r_[np.ones(spec.n1, dtype=np.int8), np.zeros(spec.n0, dtype=np.int8)]
    else:
        x = _draw_covariates(spec, rng, spec.n, np.zeros(spec.d))
        a = (rng.random(spec.n) < spec.propensity(x)).astype(np.int8)

    mu0 = spec.outcome_mean(x)
    y0 = mu0 + spec.noise_sd * rng.standard_normal(x.shape[0])
    y1 = y0 + spec.effect(x)
    y = np.where(a == 1, y1, y0)
    names = tuple(f"x{j + 1}" for j in range(spec.d))
    sample = PooledSample(covariates=CovariateTable.from_array(names, x), treatment=a, outcome=y,
                          subject_id=[f"s{i}" for i in range(x.shape[0])])
    return SimulatedPool(sample, spec.propensity(x), mu0, y0, y1)


def oracle_att(spec: DgpSpec, n_oracle: int = 1_000_000, seed: int = 0) -> float:
    """
    E[Y(1) - Y(0) | A=1] by brute force over `n_oracle` draws of treated subjects,
    using the retained potential outcomes. Constant-effect specs return tau, checked
    against the brute-force value.
    """
    if n_oracle < MIN_ORACLE_DRAWS:
        raise ConfigError(f"Oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_oracle}")
    if spec.assignment == "two-population":
        big = replace(spec, n1=n_oracle, n0=2)
    else:
        big = replace(spec, n=n_oracle)
    pool = generate_pooled(big, seed=derive_seed(seed, 7))
    brute = pool.true_att
    if not spec.heterogeneous:
        if abs(brute - spec.tau) > 1e-9 * max(1.0, abs(spec.tau)):
            raise DgpError(f"Constant-effect oracle mismatch: brute force {brute} vs tau {spec.tau}")
        return float(spec.tau)
    return brute


# --- Monte Carlo ---

@dataclass(frozen=True)
class McResult:
    method: str
    reps: int
    oracle: float
    mean_tau_hat: float
    bias: float
    mc_se: float
    empirical_variance: float
    mean_formula_variance: float
    coverage95: float
    rejection_rate: float
    failures: int = 0

    @property
    def variance_ratio(self) -> float:
        return self.mean_formula_variance / self.empirical_variance if self.empirical_variance > 0 else float("nan")

    def to_record(self) -> dict:
        record = dict(self.__dict__)
        record["variance_ratio"] = self.variance_ratio
        return record


def _fit_mode_nuisance(pool: SimulatedPool, spec: EstimatorSpec, propensity_mode: str,
                       outcome_mode: str, plan: CrossFitPlan) -> NuisanceFit:
    sample = pool.sample
    oracle = pool.oracle_nuisance()
    e_hat = mu0_hat = None
    if spec.needs_propensity:
        if propensity_mode == "oracle":
            e_hat = oracle.e_hat
        else:
            features = "squared" if propensity_mode == "misspecified" else spec.propensity.features
            _, e_hat = fit_propensity(sample, plan.child(1), spec.propensity.lambda_grid, features)
    if spec.needs_outcome:
        if outcome_mode == "oracle":
            mu0_hat = oracle.mu0_hat
        else:
            features = "squared" if outcome_mode == "misspecified" else spec.outcome.features
            model, _ = fit_outcome(OutcomeRows.from_controls(sample, velocity=False), plan.child(2),
                                   spec.outcome.kind, spec.outcome.hyper_grid, features)
            mu0_hat = model.predict_mu0(sample)
    source = "oracle" if propensity_mode == outcome_mode == "oracle" else "fitted"
    return NuisanceFit(e_hat=e_hat, mu0_hat=mu0_hat, source=source)


def run_mc(spec: DgpSpec, estimator_spec: EstimatorSpec, reps: int, seed: int = 0,
           propensity_mode: str = "fitted", outcome_mode: str = "fitted",
           n_oracle: int = 1_000_000) -> Dict[str, McResult]:
    """
    Repeats generate -> nuisances -> estimate -> variance -> CI `reps` times and
    aggregates per estimator. Nuisances are cross-fitted ("fitted"), fitted on squared
    covariates ("misspecified") or taken from the data-generating process ("oracle").
    Results depend only on `seed`, never on the thread count.
    """
    if reps < MIN_REPS:
        raise ConfigError(f"Monte Carlo needs reps >= {MIN_REPS}, got {reps}")
    for mode in (propensity_mode, outcome_mode):
        if mode not in NUISANCE_MODES:
            raise ConfigError(f"Nuisance mode must be one of {NUISANCE_MODES}, got '{mode}'")
    truth = oracle_att(spec, n_oracle=n_oracle, seed=seed)
    started = time.monotonic()
    inner = replace(estimator_spec.plan, n_jobs=1)

    def one_rep(r: int, rep_seed: int):
        try:
            pool = generate_pooled(spec, seed=rep_seed)
            nuisance = _fit_mode_nuisance(pool, estimator_spec, propensity_mode, outcome_mode,
                                          replace(inner, seed=derive_seed(rep_seed, 1)))
            run = estimate(pool.sample, nuisance, estimator_spec)
            return {m: (est.tau_hat, est.variance) for m, est in run.estimates.items()}
        except ExtArmError as e:
            logger.debug("Monte Carlo rep %d failed: %s", r, e)
            return None

    outcomes = run_folds(one_rep, list(enumerate(spawn_seeds(seed, reps))), estimator_spec.plan.n_jobs)
    done = [o for o in outcomes if o is not None]
    failures = reps - len(done)
    if failures > MAX_FAILURE_FRACTION * reps:
        raise MonteCarloFailureError(f"{failures} of {reps} Monte Carlo repetitions failed")

    results = {}
    for method in estimator_spec.methods:
        tau = np.array([o[method][0] for o in done])
        var = np.array([o[method][1] for o in done])
        half = 1.96 * np.sqrt(var)
        emp_var = float(np.var(tau, ddof=1))
        results[method] = McResult(
            method=method, reps=len(done), oracle=truth, mean_tau_hat=float(np.mean(tau)),
            bias=float(np.mean(tau) - truth), mc_se=float(np.sqrt(emp_var / len(done))),
            empirical_variance=emp_var, mean_formula_variance=float(np.mean(var)),
            coverage95=float(np.mean(np.abs(tau - truth) <= half)),
            rejection_rate=float(np.mean(np.abs(tau) > half)), failures=failures)
    logger.info("-> Monte Carlo: %d reps (%d failed) in %.1fs", reps, failures, time.monotonic() - started)
    return results


def mc_table(results: Mapping[str, McResult]) -> pd.DataFrame:
    return pd.DataFrame([r.to_record() for r in results.values()])


# --- Overlap resampling ---

def resample_probabilities(e_control: np.ndarray, beta: float) -> np.ndarray:
    """ Normalized [(1 - e)/e]^beta; beta = 0 gives uniform probabilities. """
    e_control = np.asarray(e_control, dtype=float)
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if np.any((e_control <= 0) | (e_control >= 1)):
        raise DgpError("Resampling needs propensity scores strictly inside (0, 1)")
    if np.all(e_control >= 1 - 1e-9):
        raise DgpError("Degenerate resampling weights: every control has e_hat ~ 1")
    log_w = beta * (np.log1p(-e_control) - np.log(e_control))
    w = np.exp(log_w - log_w.max())
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise DgpError("Degenerate resampling weights")
    return w / total


def beta_resample(sample: PooledSample, e_hat: np.ndarray, beta: float,
                  seed: int) -> Tuple[PooledSample, np.ndarray]:
    """
    Redraws the historical controls (with replacement, original pool size) with
    probability proportional to [(1 - e)/e]^beta; trial rows are kept. Returns the
    new sample and the source row of each of its rows.
    """
    e_hat = np.asarray(e_hat, dtype=float)
    control = np.flatnonzero(sample.control)
    probs = resample_probabilities(e_hat[control], beta)
    drawn = np.random.default_rng(seed).choice(control, size=control.shape[0], replace=True, p=probs)
    rows = np.concatenate([np.flatnonzero(sample.treated), drawn])
    return sample.take(rows), rows


def sweep_beta(spec: DgpSpec, beta_grid: Sequence[float], estimator_spec: EstimatorSpec,
               resamples_per_beta: int = 20, seed: int = 0, n_oracle: int = 1_000_000) -> pd.DataFrame:
    """
    Overlap-resampling study on one synthetic trial + historical pool. For each beta
    the pool is resampled `resamples_per_beta` times and the full pipeline is rerun
    with formula variances; PSM uses the matched-control form so that control reuse
    shows up as overlap shrinks. Per method the table reports the mean |standardized
    bias| and `variance_ratio`, the mean over resamples of the variance divided by the
    reference variance (PSM, or the first method, at the smallest beta) of the resample
    with the same index.
    """
    grid = [float(b) for b in beta_grid]
    if not grid or grid != sorted(grid):
        raise ConfigError(f"beta grid must be non-empty and sorted ascending, got {list(beta_grid)}")
    if resamples_per_beta < 1:
        raise ConfigError("resamples_per_beta must be >= 1")
    truth = oracle_att(spec, n_oracle=n_oracle, seed=seed)
    base = generate_pooled(spec, seed=derive_seed(seed, 1)).sample
    sd_hist = float(np.std(base.outcome[base.control], ddof=1))
    _, e_base = fit_propensity(base, estimator_spec.plan.child(3), estimator_spec.propensity.lambda_grid,
                               estimator_spec.propensity.features)

    jobs = [(i, beta, r) for i, beta in enumerate(grid) for r in range(resamples_per_beta)]
    inner = replace(estimator_spec, psm_form="matched", plan=replace(estimator_spec.plan, n_jobs=1))

    def one(i: int, beta: float, r: int):
        resampled, _ = beta_resample(base, e_base, beta, derive_seed(seed, 100 + i, r))
        cell_spec = inner.with_plan(inner.plan.child(100 + i, r))
        nuisance = fit_nuisances(resampled, cell_spec)
        run = estimate(resampled, nuisance, cell_spec)
        gamma = next((est.gamma_hat for est in run.estimates.values() if est.gamma_hat is not None), None)
        return {m: (standardized_bias(est.tau_hat, truth, sd_hist), est.variance, gamma)
                for m, est in run.estimates.items()}

    cells = run_folds(one, jobs, estimator_spec.plan.n_jobs)
    rows = []
    for (i, beta, r), cell in zip(jobs, cells):
        for method, (bias, variance, gamma) in cell.items():
            rows.append({"beta": beta, "resample": r, "method": method, "abs_std_bias": bias,
                         "variance": variance, "gamma_hat": gamma})
    long = pd.DataFrame(rows)
    reference_method = "PSM" if "PSM" in estimator_spec.methods else estimator_spec.methods[0]
    reference = (long[(long["beta"] == grid[0]) & (long["method"] == reference_method)]
                 .set_index("resample")["variance"])
    long["ratio"] = long["variance"] / long["resample"].map(reference)
    table = (long.groupby(["beta", "method"], sort=False)
             .agg(mean_abs_std_bias=("abs_std_bias", "mean"), mean_variance=("variance", "mean"),
                  mean_gamma_hat=("gamma_hat", "mean"), resamples=("resample", "count"),
                  variance_ratio=("ratio", "mean"))
             .reset_index())
    logger.info("-> Sweep: %d beta values x %d resamples, reference %s at beta=%g", len(grid),
                resamples_per_beta, reference_method, grid[0])
    order = {m: k for k, m in enumerate(METHODS)}
    return table.sort_values(["beta", "method"], key=lambda s: s.map(order) if s.name == "method" else s,
                             kind="stable").reset_index(drop=True)
# file: simulation.py
