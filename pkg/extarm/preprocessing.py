# -*- coding: utf-8 -*-
# file: preprocessing.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Fold-internal feature preparation: iterative ridge imputation, feature maps, standardization.

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .data_model import CovariateTable
from .errors import ConfigError, ConstantColumnWarning, DataValidationError

logger = logging.getLogger(__name__)

IMPUTER_ROUNDS = 5
IMPUTER_PENALTY = 1.0
IMPUTER_ORDERS = ("ascending", "random")
FEATURE_MAPS = ("identity", "squared")


def _is_constant(sd: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return sd <= 1e-12 * (1.0 + np.abs(mean))


# --- Iterative imputation ---

@dataclass(frozen=True)
class ImputeStep:
    """ Ridge fit of one column on the other (standardized) columns. """
    column: int
    features: Tuple[int, ...]
    center: np.ndarray
    scale: np.ndarray
    intercept: float
    coef: np.ndarray

    def predict(self, matrix: np.ndarray) -> np.ndarray:
        if not self.features:
            return np.full(matrix.shape[0], self.intercept)
        z = (matrix[:, self.features] - self.center) / self.scale
        return self.intercept + z @ self.coef


@dataclass(frozen=True)
class ImputerState:
    names: Tuple[str, ...]
    column_means: np.ndarray
    steps: Tuple[ImputeStep, ...]
    rounds: int
    penalty: float
    order: Tuple[int, ...]

    def transform(self, table: CovariateTable) -> np.ndarray:
        """ Returns a dense matrix; observed cells are copied through unchanged. """
        if table.names != self.names:
            table = table.select(self.names)
        filled = table.values.copy()
        missing = table.missing
        if not missing.any():
            return filled
        filled[missing] = np.broadcast_to(self.column_means, filled.shape)[missing]
        for step in self.steps:
            rows = missing[:, step.column]
            if rows.any():
                filled[rows, step.column] = step.predict(filled[rows])
        return filled

    def summary(self) -> dict:
        return {"rounds": self.rounds, "penalty": self.penalty,
                "order": [self.names[j] for j in self.order],
                "column_means": dict(zip(self.names, self.column_means.tolist()))}


def _ridge_step(filled: np.ndarray, observed: np.ndarray, column: int, penalty: float) -> ImputeStep:
    others = [k for k in range(filled.shape[1]) if k != column]
    target = filled[observed, column]
    intercept = float(target.mean())
    if not others:
        return ImputeStep(column, (), np.empty(0), np.empty(0), intercept, np.empty(0))
    design = filled[np.ix_(observed, others)]
    center = design.mean(axis=0)
    scale = design.std(axis=0)
    keep = ~_is_constant(scale, center)
    features = tuple(int(k) for k, ok in zip(others, keep) if ok)
    if not features:
        return ImputeStep(column, (), np.empty(0), np.empty(0), intercept, np.empty(0))
    z = (design[:, keep] - center[keep]) / scale[keep]
    gram = z.T @ z + penalty * np.eye(z.shape[1])
    coef = np.linalg.solve(gram, z.T @ (target - intercept))
    return ImputeStep(column, features, center[keep], scale[keep], intercept, coef)


def fit_imputer(table: CovariateTable, seed: Optional[int] = None, rounds: int = IMPUTER_ROUNDS,
                penalty: float = IMPUTER_PENALTY, order: str = "ascending") -> ImputerState:
    """
    Round-robin ridge imputation. Missing cells start at the column mean, then each
    round regresses every column on the others (fit on the rows where that column is
    observed) and overwrites its missing cells with the prediction.

    Column order is ascending missingness, or a seeded random permutation.
    """
    if rounds < 1:
        raise ConfigError(f"Imputer rounds must be >= 1, got {rounds}")
    if order not in IMPUTER_ORDERS:
        raise ConfigError(f"Imputer order must be one of {IMPUTER_ORDERS}, got '{order}'")
    counts = table.missing.sum(axis=0)
    empty = [n for n, c in zip(table.names, counts) if c == table.n_rows]
    if empty:
        raise DataValidationError(f"Cannot impute column(s) with no observed value: {empty}")

    observed = ~table.missing
    means = np.array([table.values[observed[:, j], j].mean() for j in range(table.n_cols)])
    if order == "random":
        column_order = tuple(int(j) for j in np.random.default_rng(seed).permutation(table.n_cols))
    else:
        column_order = tuple(int(j) for j in np.argsort(counts, kind="stable"))

    if not table.has_missing:
        return ImputerState(table.names, means, (), rounds, penalty, column_order)

    filled = table.values.copy()
    filled[table.missing] = np.broadcast_to(means, filled.shape)[table.missing]
    steps = []
    for _ in range(rounds):
        for j in column_order:
            step = _ridge_step(filled, observed[:, j], j, penalty)
            rows = table.missing[:, j]
            if rows.any():
                filled[rows, j] = step.predict(filled[rows])
            steps.append(step)
    return ImputerState(table.names, means, tuple(steps), rounds, penalty, column_order)


# --- Feature maps and standardization ---

def apply_feature_map(matrix: np.ndarray, kind: str) -> np.ndarray:
    """ "identity" keeps the covariates, "squared" replaces each by its square. """
    if kind == "identity":
        return matrix
    if kind == "squared":
        return matrix ** 2
    raise ConfigError(f"Unknown feature map '{kind}', expected one of {FEATURE_MAPS}")


@dataclass(frozen=True)
class Standardizer:
    names: Tuple[str, ...]
    keep: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix[:, self.keep] - self.mean) / self.sd

    @property
    def kept_names(self) -> Tuple[str, ...]:
        return tuple(self.names[k] for k in self.keep)


def fit_standardizer(matrix: np.ndarray, names: Sequence[str], warn: bool = True) -> Standardizer:
    """ Per-feature mean and sd (ddof=0); constant columns are dropped. """
    mean = matrix.mean(axis=0)
    sd = matrix.std(axis=0)
    constant = _is_constant(sd, mean)
    if constant.any() and warn:
        dropped = [n for n, c in zip(names, constant) if c]
        message = f"Constant covariate column(s) dropped: {dropped}"
        logger.warning(message)
        warnings.warn(message, ConstantColumnWarning, stacklevel=3)
    keep = np.flatnonzero(~constant)
    return Standardizer(tuple(names), keep, mean[keep], sd[keep])


@dataclass(frozen=True)
class Preprocessor:
    """ Imputer -> feature map -> standardizer, all fitted on the same training rows. """
    imputer: ImputerState
    features: str
    standardizer: Standardizer

    def transform(self, table: CovariateTable) -> np.ndarray:
        return self.standardizer.transform(apply_feature_map(self.imputer.transform(table), self.features))

    def summary(self) -> dict:
        return {"imputer": self.imputer.summary(), "features": self.features,
                "kept_columns": list(self.standardizer.kept_names),
                "mean": self.standardizer.mean.tolist(), "sd": self.standardizer.sd.tolist()}


def fit_preprocessor(table: CovariateTable, seed: Optional[int] = None, features: str = "identity",
                     imputer_rounds: int = IMPUTER_ROUNDS, imputer_order: str = "ascending",
                     warn: bool = False) -> Preprocessor:
    imputer = fit_imputer(table, seed=seed, rounds=imputer_rounds, order=imputer_order)
    mapped = apply_feature_map(imputer.transform(table), features)
    names = table.names if features == "identity" else tuple(f"{n}^2" for n in table.names)
    return Preprocessor(imputer, features, fit_standardizer(mapped, names, warn=warn))
# file: preprocessing.py
