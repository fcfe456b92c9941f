# -*- coding: utf-8 -*-
# file: crossfit.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Fold plans for cross-fitting: stratified folds (propensity), grouped folds (outcome).

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import GroupKFold, StratifiedGroupKFold, StratifiedKFold

from .errors import ConfigError, EstimationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrossFitPlan:
    outer_folds: int = 5
    inner_folds: int = 3
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ConfigError(f"Fold counts must be >= 2, got outer={self.outer_folds}, inner={self.inner_folds}")

    def child(self, *path: int) -> "CrossFitPlan":
        """ Same fold counts with a seed derived from this plan's seed and `path`. """
        return CrossFitPlan(self.outer_folds, self.inner_folds, derive_seed(self.seed, *path), self.n_jobs)


def derive_seed(seed: int, *path: int) -> int:
    """ Deterministic 32-bit child seed; independent of how work is scheduled. """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(sequence.generate_state(1)[0])


def spawn_seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(count)]


def stratified_folds(labels: np.ndarray, n_splits: int, seed: int,
                     groups: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Fold id per row, preserving the label balance in every fold. When `groups`
    repeats (resampled copies of one subject), copies are kept in the same fold.
    """
    labels = np.asarray(labels)
    placeholder = np.zeros((labels.shape[0], 1))
    fold_of = np.empty(labels.shape[0], dtype=int)
    if groups is not None and len(set(groups)) < len(groups):
        splitter = StratifiedGroupKFold(n_splits=n_splits, shuffle=True, random_state=derive_seed(seed))
        splits = splitter.split(placeholder, labels, groups=np.asarray(groups, dtype=object).astype(str))
    else:
        splitter = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=derive_seed(seed))
        splits = splitter.split(placeholder, labels)
    for k, (_, test) in enumerate(splits):
        fold_of[test] = k
    return fold_of


def grouped_folds(groups: Sequence[str], n_splits: int, seed: int) -> np.ndarray:
    """ Fold id per row; all rows of one group share a fold. Group order is shuffled by `seed`. """
    codes, inverse = np.unique(np.asarray(groups, dtype=object).astype(str), return_inverse=True)
    if codes.shape[0] < n_splits:
        raise EstimationError(f"Need at least {n_splits} subjects for grouped folds, got {codes.shape[0]}")
    shuffled = np.random.default_rng(derive_seed(seed)).permutation(codes.shape[0])[inverse]
    fold_of = np.empty(inverse.shape[0], dtype=int)
    for k, (_, test) in enumerate(GroupKFold(n_splits=n_splits).split(np.zeros((inverse.shape[0], 1)),
                                                                      groups=shuffled)):
        fold_of[test] = k
    return fold_of


def assert_no_leakage(train_groups: Sequence[Sequence[str]], row_groups: Sequence[str],
                      row_model: np.ndarray) -> None:
    """
    Every scored row must come from a fold model whose training groups exclude it.
    `row_model[i]` is the fold model scoring row i (-1 for an averaged or refit model
    on rows that were never in training).
    """
    sets = [set(g) for g in train_groups]
    leaked = [str(g) for g, k in zip(row_groups, row_model) if k >= 0 and g in sets[k]]
    if leaked:
        raise EstimationError(f"Cross-fit leakage: {len(leaked)} row(s) scored by a model trained on them, "
                              f"e.g. {leaked[:5]}")


def run_folds(fn: Callable, jobs: Sequence, n_jobs: int = 1) -> list:
    """ Evaluates fn(*job) for each job, threaded when n_jobs != 1; result order follows `jobs`. """
    if n_jobs == 1 or len(jobs) < 2:
        return [fn(*job) for job in jobs]
    return Parallel(n_jobs=n_jobs, backend="threading")(delayed(fn)(*job) for job in jobs)
# file: crossfit.py
