# -*- coding: utf-8 -*-
# file: outcome_model.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Control-outcome model mu0(X): velocity regression with nested grouped cross-fitting.

import logging
import warnings
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .crossfit import CrossFitPlan, assert_no_leakage, derive_seed, grouped_folds, run_folds
from .data_model import COPY_SEPARATOR, CovariateTable, PooledSample, VelocityTable
from .errors import ConfigError, DataValidationError, EstimationError, ZeroVarianceWarning
from .preprocessing import Preprocessor, fit_preprocessor
from .regressors import DEFAULT_HYPER_GRIDS, make_regressor

logger = logging.getLogger(__name__)


def _base_id(subject_id: str) -> str:
    return str(subject_id).split(COPY_SEPARATOR, 1)[0]


@dataclass(frozen=True, eq=False)
class OutcomeRows:
    """
    Control training rows for the outcome model. With `velocity` the target is the
    per-visit velocity (y - y0)/(t - t0); otherwise it is the outcome itself.
    `groups` holds the subject of every row (several rows per subject are allowed).
    """
    covariates: CovariateTable
    target: np.ndarray
    groups: np.ndarray
    velocity: bool = True

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float)
        groups = np.array([_base_id(g) for g in self.groups], dtype=object)
        if target.shape != (self.covariates.n_rows,) or groups.shape != target.shape:
            raise DataValidationError("Outcome rows: covariates, target and groups differ in length")
        if not np.all(np.isfinite(target)):
            raise DataValidationError("Outcome model target has non-finite values")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "groups", groups)

    @property
    def n_rows(self) -> int:
        return int(self.target.shape[0])

    @property
    def n_subjects(self) -> int:
        return int(np.unique(self.groups.astype(str)).shape[0])

    @classmethod
    def from_velocity_table(cls, table: VelocityTable, covariates: CovariateTable) -> "OutcomeRows":
        return cls(covariates.take(table.covariate_row), table.velocity, table.subject_id, velocity=True)

    @classmethod
    def from_controls(cls, sample: PooledSample, velocity: bool = True) -> "OutcomeRows":
        """ One row per control subject of the pooled sample. """
        rows = np.flatnonzero(sample.control)
        groups = sample.base_ids()[rows]
        if not velocity:
            return cls(sample.covariates.take(rows), sample.outcome[rows], groups, velocity=False)
        if sample.baseline is None or sample.elapsed is None:
            raise ConfigError("Velocity outcome model needs baseline outcome and time columns in the schema")
        elapsed = sample.elapsed[rows]
        if np.any(elapsed <= 0):
            raise DataValidationError("Elapsed time must be positive for velocity targets",
                                      rows=(rows[elapsed <= 0] + 1).tolist())
        target = (sample.outcome[rows] - sample.baseline[rows]) / elapsed
        return cls(sample.covariates.take(rows), target, groups, velocity=True)


@dataclass(frozen=True)
class OutcomeFold:
    preprocessor: Preprocessor
    predictor: object
    params: dict
    train_groups: frozenset

    def predict_target(self, table: CovariateTable) -> np.ndarray:
        return self.predictor.predict(self.preprocessor.transform(table))


@dataclass(frozen=True)
class OutcomeModel:
    """
    Outer-fold regressors of the control outcome. A row whose subject was used in
    training is scored by the one fold model that did not see it; every other row
    gets the average of all fold models.
    """
    kind: str
    velocity: bool
    folds: Tuple[OutcomeFold, ...]
    fold_of: np.ndarray
    hyper_grid: Tuple[dict, ...]
    features: str = "identity"

    def scoring_folds(self, groups: Sequence[str]) -> np.ndarray:
        """ Fold model index per row, -1 where the fold average is used. """
        owner = {}
        for k, fold in enumerate(self.folds):
            for g in fold.train_groups:
                owner.setdefault(g, set()).add(k)
        n_folds = len(self.folds)
        row_model = np.full(len(groups), -1, dtype=int)
        for i, g in enumerate(groups):
            seen_in = owner.get(_base_id(g))
            if seen_in:
                unseen = [k for k in range(n_folds) if k not in seen_in]
                row_model[i] = unseen[0]
        return row_model

    def predict_target(self, table: CovariateTable, groups: Optional[Sequence[str]] = None) -> np.ndarray:
        if groups is None:
            return np.mean([fold.predict_target(table) for fold in self.folds], axis=0)
        groups = [str(g) for g in groups]
        row_model = self.scoring_folds(groups)
        assert_no_leakage([f.train_groups for f in self.folds], [_base_id(g) for g in groups], row_model)
        out = np.empty(table.n_rows)
        fresh = np.flatnonzero(row_model < 0)
        if fresh.size:
            out[fresh] = np.mean([fold.predict_target(table.take(fresh)) for fold in self.folds], axis=0)
        for k, fold in enumerate(self.folds):
            rows = np.flatnonzero(row_model == k)
            if rows.size:
                out[rows] = fold.predict_target(table.take(rows))
        return out

    def predict_outcome(self, table: CovariateTable, baseline: Optional[np.ndarray] = None,
                        elapsed: Optional[np.ndarray] = None,
                        groups: Optional[Sequence[str]] = None) -> np.ndarray:
        """ y_hat = y0 + v_hat(X) * (t - t0) for velocity models, the direct prediction otherwise. """
        target = self.predict_target(table, groups)
        if not self.velocity:
            return target
        if baseline is None or elapsed is None:
            raise ConfigError("Velocity outcome model needs baseline outcome and elapsed time to predict")
        return np.asarray(baseline, dtype=float) + target * np.asarray(elapsed, dtype=float)

    def predict_mu0(self, sample: PooledSample) -> np.ndarray:
        """ mu0_hat for every pooled row, out-of-fold for subjects the model was trained on. """
        return self.predict_outcome(sample.covariates, sample.baseline, sample.elapsed, sample.base_ids())

    def summary(self) -> dict:
        return {"kind": self.kind, "velocity": self.velocity, "features": self.features,
                "hyper_grid": list(self.hyper_grid),
                "fold_params": [f.params for f in self.folds],
                "fold_assignment": self.fold_of.tolist()}


def _fit_regressor(rows: OutcomeRows, index: np.ndarray, kind: str, params: Mapping, seed: int,
                   features: str) -> OutcomeFold:
    table = rows.covariates.take(index)
    pre = fit_preprocessor(table, seed=seed, features=features)
    predictor = make_regressor(kind, params).fit(pre.transform(table), rows.target[index])
    return OutcomeFold(pre, predictor, dict(params), frozenset(rows.groups[index]))


def select_hyper(rows: OutcomeRows, index: np.ndarray, kind: str, hyper_grid: Sequence[Mapping],
                 n_folds: int, seed: int, features: str = "identity") -> Tuple[dict, List[float]]:
    """ Hyperparameters with the lowest grouped-CV mean squared error on the target. """
    if len(hyper_grid) == 1:
        return dict(hyper_grid[0]), []
    folds = grouped_folds(rows.groups[index], n_folds, seed)
    errors = np.zeros(len(hyper_grid))
    for k in range(n_folds):
        train, test = index[folds != k], index[folds == k]
        pre = fit_preprocessor(rows.covariates.take(train), seed=seed, features=features)
        x_train = pre.transform(rows.covariates.take(train))
        x_test = pre.transform(rows.covariates.take(test))
        for g, params in enumerate(hyper_grid):
            predictor = make_regressor(kind, params).fit(x_train, rows.target[train])
            errors[g] += np.sum((predictor.predict(x_test) - rows.target[test]) ** 2) / index.shape[0]
    return dict(hyper_grid[int(np.argmin(errors))]), errors.tolist()


def fit_outcome(rows: OutcomeRows, plan: CrossFitPlan, kind: str = "ridge",
                hyper_grid: Optional[Sequence[Mapping]] = None,
                features: str = "identity") -> Tuple[OutcomeModel, np.ndarray]:
    """
    Cross-fits the control outcome model with folds grouped by subject. Within each
    outer fold the hyperparameters are chosen by inner grouped CV.

    Returns the model and the out-of-fold target prediction for every training row.
    """
    if hyper_grid is None:
        hyper_grid = DEFAULT_HYPER_GRIDS.get(kind)
    if not hyper_grid:
        raise ConfigError(f"Empty hyperparameter grid for outcome regressor '{kind}'")
    hyper_grid = tuple(dict(h) for h in hyper_grid)
    make_regressor(kind, hyper_grid[0])
    if rows.n_subjects < plan.outer_folds:
        raise EstimationError(
            f"Outcome model needs at least {plan.outer_folds} control subjects, got {rows.n_subjects}")

    fold_of = grouped_folds(rows.groups, plan.outer_folds, plan.seed)

    def outer(k: int):
        train = np.flatnonzero(fold_of != k)
        seed = derive_seed(plan.seed, k)
        params, _ = select_hyper(rows, train, kind, hyper_grid, plan.inner_folds, seed, features)
        return _fit_regressor(rows, train, kind, params, seed, features)

    folds = tuple(run_folds(outer, [(k,) for k in range(plan.outer_folds)], plan.n_jobs))
    oof = np.empty(rows.n_rows)
    for k, fold in enumerate(folds):
        test = np.flatnonzero(fold_of == k)
        oof[test] = fold.predict_target(rows.covariates.take(test))

    logger.info("-> Outcome model (%s, velocity=%s): fold params %s, OOF target MSE %.4g",
                kind, rows.velocity, [f.params for f in folds], float(np.mean((oof - rows.target) ** 2)))
    model = OutcomeModel(kind=kind, velocity=rows.velocity, folds=folds, fold_of=fold_of,
                         hyper_grid=hyper_grid, features=features)
    return model, oof


def estimate_rho0(mu0_hat: np.ndarray, y: np.ndarray) -> float:
    """
    Pearson correlation between out-of-fold predictions and observed control outcomes,
    clamped to [-1, 1]. Constant predictions give 0 (the conservative value).
    """
    mu0_hat = np.asarray(mu0_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if mu0_hat.shape != y.shape:
        raise DataValidationError("Predictions and outcomes differ in length")
    if y.shape[0] < 3:
        raise EstimationError(f"rho0 needs at least 3 control rows, got {y.shape[0]}")
    if np.std(mu0_hat) <= 1e-12 * (1.0 + abs(np.mean(mu0_hat))) or np.std(y) == 0:
        message = "Outcome predictions (or outcomes) have zero variance; using rho0 = 0"
        logger.warning(message)
        warnings.warn(message, ZeroVarianceWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.corrcoef(mu0_hat, y)[0, 1], -1.0, 1.0))
# file: outcome_model.py
