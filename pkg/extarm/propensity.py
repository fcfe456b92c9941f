# -*- coding: utf-8 -*-
# file: propensity.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Trial-membership propensity e(X): L2 logistic regression by IRLS with nested stratified CV.

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .crossfit import CrossFitPlan, assert_no_leakage, derive_seed, run_folds, stratified_folds
from .data_model import CovariateTable, PooledSample
from .errors import ConfigError, ConvergenceError, DegenerateCohortError, SeparationWarning
from .preprocessing import Preprocessor, fit_preprocessor

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, 4, 9))
PROBABILITY_CLIP = 1e-6
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
# |coefficient| on standardized features beyond which a perfect fit counts as separation
SEPARATION_COEF = 20.0


def _design(z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(z.shape[0]), z])


def penalized_loss(beta: np.ndarray, z: np.ndarray, y: np.ndarray, lam: float) -> float:
    """ Averaged negative log-likelihood plus (lam/2)*|coef|^2; beta[0] is the unpenalized intercept. """
    s = _design(z) @ beta
    return float(np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * lam * np.sum(beta[1:] ** 2))


def penalized_gradient(beta: np.ndarray, z: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    x = _design(z)
    grad = x.T @ (expit(x @ beta) - y) / y.shape[0]
    grad[1:] += lam * beta[1:]
    return grad


@dataclass(frozen=True)
class LogisticFit:
    beta: np.ndarray
    lam: float
    iterations: int
    converged: bool
    gradient_norm: float

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def coef(self) -> np.ndarray:
        return self.beta[1:]

    def decision(self, z: np.ndarray) -> np.ndarray:
        return self.beta[0] + z @ self.beta[1:]


def fit_logistic_irls(z: np.ndarray, y: np.ndarray, lam: float, max_iter: int = IRLS_MAX_ITER,
                      tol: float = IRLS_TOL) -> LogisticFit:
    """
    Newton / IRLS on the averaged penalized loss with step halving. Stops when the
    gradient sup-norm reaches `tol` or after `max_iter` Newton steps.
    """
    n, d = z.shape
    x = _design(z)
    penalty = np.full(d + 1, lam)
    penalty[0] = 0.0
    p0 = float(np.clip(y.mean(), PROBABILITY_CLIP, 1 - PROBABILITY_CLIP))
    beta = np.zeros(d + 1)
    beta[0] = np.log(p0 / (1 - p0))
    loss = penalized_loss(beta, z, y, lam)

    for iteration in range(1, max_iter + 1):
        grad = penalized_gradient(beta, z, y, lam)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            return LogisticFit(beta, lam, iteration - 1, True, grad_norm)
        p = expit(x @ beta)
        hessian = (x * (p * (1 - p))[:, None]).T @ x / n + np.diag(penalty)
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, grad, rcond=None)[0]

        t = 1.0
        for _ in range(50):
            candidate = beta - t * step
            new_loss = penalized_loss(candidate, z, y, lam)
            if np.isfinite(new_loss) and new_loss <= loss + 1e-12 * max(1.0, abs(loss)):
                break
            t *= 0.5
        else:
            if not np.isfinite(new_loss):
                raise ConvergenceError("Logistic loss became non-finite", last_iterate=beta, iterations=iteration)
            # No descent left at machine precision; treat as stationary
            return LogisticFit(beta, lam, iteration, grad_norm <= tol, grad_norm)
        beta, loss = candidate, new_loss

    grad_norm = float(np.max(np.abs(penalized_gradient(beta, z, y, lam))))
    if grad_norm > tol:
        logger.debug("IRLS stopped at %d iterations with gradient %.3g (lambda=%g)", max_iter, grad_norm, lam)
    return LogisticFit(beta, lam, max_iter, grad_norm <= tol, grad_norm)


def is_separated(fit: LogisticFit, z: np.ndarray, y: np.ndarray) -> bool:
    s = fit.decision(z)
    perfect = np.all((s > 0) == (y == 1))
    return bool(perfect and fit.coef.size and np.max(np.abs(fit.coef)) > SEPARATION_COEF)


def _held_out_loglik(fit: LogisticFit, z: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(expit(fit.decision(z)), PROBABILITY_CLIP, 1 - PROBABILITY_CLIP)
    return float(np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class PropensityFold:
    preprocessor: Preprocessor
    fit: LogisticFit
    separated: bool = False

    def predict(self, table: CovariateTable) -> np.ndarray:
        z = self.preprocessor.transform(table)
        return np.clip(expit(self.fit.decision(z)), PROBABILITY_CLIP, 1 - PROBABILITY_CLIP)


def _fit_fold(table: CovariateTable, y: np.ndarray, lam: float, lambda_grid: Sequence[float], seed: int,
              features: str, warn: bool) -> PropensityFold:
    pre = fit_preprocessor(table, seed=seed, features=features, warn=warn)
    z = pre.transform(table)
    fit = fit_logistic_irls(z, y, lam)
    if is_separated(fit, z, y):
        largest = max(lambda_grid)
        message = f"Perfect separation at lambda={lam:g}; refitting with lambda={largest:g}"
        logger.warning(message)
        warnings.warn(message, SeparationWarning, stacklevel=2)
        return PropensityFold(pre, fit_logistic_irls(z, y, largest), separated=True)
    return PropensityFold(pre, fit)


def select_lambda(table: CovariateTable, y: np.ndarray, lambda_grid: Sequence[float], n_folds: int,
                  seed: int, features: str = "identity",
                  groups: Optional[Sequence[str]] = None) -> Tuple[float, List[float]]:
    """ Grid point with the best mean held-out log-likelihood (first one on ties). """
    if len(lambda_grid) == 1:
        return float(lambda_grid[0]), []
    folds = stratified_folds(y, n_folds, seed, groups=groups)
    scores = np.zeros(len(lambda_grid))
    for k in range(n_folds):
        train, test = folds != k, folds == k
        pre = fit_preprocessor(table.take(np.flatnonzero(train)), seed=seed, features=features)
        z_train = pre.transform(table.take(np.flatnonzero(train)))
        z_test = pre.transform(table.take(np.flatnonzero(test)))
        for g, lam in enumerate(lambda_grid):
            fit = fit_logistic_irls(z_train, y[train], lam)
            scores[g] += _held_out_loglik(fit, z_test, y[test]) / n_folds
    best = int(np.argmax(scores))
    return float(lambda_grid[best]), scores.tolist()


@dataclass(frozen=True)
class PropensityModel:
    """
    Final model refit on all rows (for fresh covariates) plus the outer-fold models
    that produced the out-of-fold probabilities.
    """
    final: PropensityFold
    folds: Tuple[PropensityFold, ...]
    fold_of: np.ndarray
    fold_lambdas: Tuple[float, ...]
    lambda_grid: Tuple[float, ...]
    features: str = "identity"
    clip: float = PROBABILITY_CLIP
    cv_scores: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def lam(self) -> float:
        return self.final.fit.lam

    def predict(self, table: CovariateTable) -> np.ndarray:
        return self.final.predict(table)

    def odds(self, table: CovariateTable) -> np.ndarray:
        e = self.predict(table)
        return e / (1 - e)

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "lambda_grid": list(self.lambda_grid),
            "fold_lambdas": list(self.fold_lambdas),
            "features": self.features,
            "intercept": self.final.fit.intercept,
            "coefficients": dict(zip(self.final.preprocessor.standardizer.kept_names,
                                     self.final.fit.coef.tolist())),
            "iterations": self.final.fit.iterations,
            "converged": self.final.fit.converged,
            "separation_fallback": self.final.separated,
            "fold_assignment": self.fold_of.tolist(),
            "preprocessing": self.final.preprocessor.summary(),
        }


def fit_propensity(sample: PooledSample, plan: CrossFitPlan,
                   lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                   features: str = "identity") -> Tuple[PropensityModel, np.ndarray]:
    """
    Cross-fitted e(X) = P(A=1 | X) on the pooled sample. Folds are stratified on A;
    inside every outer fold, lambda is chosen by inner CV and all preprocessing is
    fitted on the outer-training rows only.

    Returns the model and the out-of-fold probabilities for every row.
    """
    lambda_grid = tuple(float(v) for v in lambda_grid)
    if not lambda_grid:
        raise ConfigError("Propensity lambda grid is empty")
    if any(not v > 0 for v in lambda_grid):
        raise ConfigError(f"Propensity lambda grid must be positive, got {lambda_grid}")
    if min(sample.n1, sample.n0) < plan.outer_folds:
        raise DegenerateCohortError(
            f"Propensity cross-fitting needs n1, n0 >= {plan.outer_folds}, got n1={sample.n1}, n0={sample.n0}")

    y = sample.treatment.astype(float)
    table = sample.covariates
    groups = sample.base_ids()
    fold_of = stratified_folds(sample.treatment, plan.outer_folds, plan.seed, groups=groups)

    def outer(k: int):
        train = np.flatnonzero(fold_of != k)
        seed = derive_seed(plan.seed, k)
        sub = table.take(train)
        lam, _ = select_lambda(sub, y[train], lambda_grid, plan.inner_folds, seed, features, groups[train])
        model = _fit_fold(sub, y[train], lam, lambda_grid, seed, features, warn=False)
        return lam, model

    results = run_folds(outer, [(k,) for k in range(plan.outer_folds)], plan.n_jobs)
    assert_no_leakage([groups[fold_of != k] for k in range(plan.outer_folds)], groups, fold_of)
    oof = np.empty(sample.n)
    for k, (_, model) in enumerate(results):
        test = np.flatnonzero(fold_of == k)
        oof[test] = model.predict(table.take(test))

    final_lam, scores = select_lambda(table, y, lambda_grid, plan.inner_folds, plan.seed, features, groups)
    final = _fit_fold(table, y, final_lam, lambda_grid, plan.seed, features, warn=True)
    logger.info("-> Propensity fit: lambda=%g, fold lambdas=%s, e_hat range [%.4f, %.4f]",
                final_lam, [r[0] for r in results], oof.min(), oof.max())
    model = PropensityModel(final=final, folds=tuple(r[1] for r in results), fold_of=fold_of,
                            fold_lambdas=tuple(r[0] for r in results), lambda_grid=lambda_grid,
                            features=features, cv_scores={"final": scores})
    return model, oof
# file: propensity.py
