# -*- coding: utf-8 -*-
# file: regressors.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Pluggable regressors for the control-outcome model: closed-form ridge and k-NN.

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError


@dataclass(frozen=True)
class FittedRidge:
    intercept: float
    coef: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + x @ self.coef

    def params(self) -> dict:
        return {"intercept": self.intercept, "coef": self.coef.tolist()}


@dataclass(frozen=True)
class RidgeRegressor:
    """ Least squares with penalty alpha*|coef|^2; the intercept is not penalized. """
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"Ridge alpha must be >= 0, got {self.alpha}")

    def fit(self, x: np.ndarray, y: np.ndarray) -> FittedRidge:
        y_mean = float(y.mean())
        if x.shape[1] == 0:
            return FittedRidge(y_mean, np.empty(0))
        x_mean = x.mean(axis=0)
        xc = x - x_mean
        gram = xc.T @ xc + self.alpha * np.eye(x.shape[1])
        try:
            coef = np.linalg.solve(gram, xc.T @ (y - y_mean))
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(gram, xc.T @ (y - y_mean), rcond=None)[0]
        return FittedRidge(float(y_mean - x_mean @ coef), coef)


@dataclass(frozen=True)
class FittedKnn:
    x: np.ndarray
    y: np.ndarray
    k: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        k = min(self.k, self.y.shape[0])
        if k == self.y.shape[0]:
            return np.full(x.shape[0], float(self.y.mean()))
        if self.x.shape[1] == 0:
            return np.full(x.shape[0], float(self.y[:k].mean()))
        distances = cdist(x, self.x)
        # stable sort: equal distances resolve to the lowest training index
        nearest = np.argsort(distances, axis=1, kind="stable")[:, :k]
        return self.y[nearest].mean(axis=1)

    def params(self) -> dict:
        return {"k": self.k, "n_train": int(self.y.shape[0])}


@dataclass(frozen=True)
class KnnRegressor:
    """ Mean target of the k nearest training rows (Euclidean, on prepared features). """
    k: int = 10

    def __post_init__(self):
        if int(self.k) < 1:
            raise ConfigError(f"k-NN needs k >= 1, got {self.k}")

    def fit(self, x: np.ndarray, y: np.ndarray) -> FittedKnn:
        return FittedKnn(np.array(x, dtype=float), np.array(y, dtype=float), int(self.k))


_REGISTRY: Dict[str, Callable] = {
    "ridge": RidgeRegressor,
    "knn": KnnRegressor,
}

DEFAULT_HYPER_GRIDS: Dict[str, List[dict]] = {
    "ridge": [{"alpha": a} for a in (0.01, 0.1, 1.0, 10.0, 100.0)],
    "knn": [{"k": k} for k in (5, 10, 20, 50)],
}


def register_regressor(kind: str, factory: Callable) -> None:
    """ Adds a regressor kind; `factory(**params)` must return an object with fit(x, y) -> predictor. """
    if kind in _REGISTRY:
        raise ConfigError(f"Regressor kind '{kind}' is already registered")
    _REGISTRY[kind] = factory


def regressor_kinds() -> List[str]:
    return sorted(_REGISTRY)


def make_regressor(kind: str, params: Mapping = None):
    try:
        factory = _REGISTRY[kind]
    except KeyError:
        raise ConfigError(f"Unknown regressor kind '{kind}', expected one of {regressor_kinds()}") from None
    try:
        return factory(**dict(params or {}))
    except TypeError as e:
        raise ConfigError(f"Bad hyperparameters {dict(params or {})} for '{kind}': {e}") from None
# file: regressors.py
