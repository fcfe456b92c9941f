# -*- coding: utf-8 -*-
# file: conftest.py
# Shared fixtures: synthetic pooled cohorts and small cross-fit plans.

import numpy as np
import pytest

from extarm.crossfit import CrossFitPlan
from extarm.data_model import CovariateTable, PooledSample


def build_pooled(n1=80, n0=240, d=3, shift=0.5, tau=1.0, noise=1.0, seed=0, missing_rate=0.0):
    """ Gaussian covariates, treated shifted by `shift`; Y = sum(X) + tau*A + noise. """
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(shift, 1.0, (n1, d)), rng.normal(0.0, 1.0, (n0, d))])
    a = np.r_[np.ones(n1, dtype=int), np.zeros(n0, dtype=int)]
    y = x.sum(axis=1) + tau * a + noise * rng.normal(size=n1 + n0)
    if missing_rate > 0:
        holes = rng.random(x.shape) < missing_rate
        holes[:, 0] = False
        x = np.where(holes, np.nan, x)
    names = tuple(f"x{j + 1}" for j in range(d))
    return PooledSample(covariates=CovariateTable.from_array(names, x), treatment=a, outcome=y,
                        subject_id=[f"s{i:04d}" for i in range(n1 + n0)])


@pytest.fixture
def make_pooled():
    return build_pooled


@pytest.fixture
def pooled():
    return build_pooled()


@pytest.fixture
def plan():
    return CrossFitPlan(outer_folds=3, inner_folds=2, seed=11)


@pytest.fixture
def tiny_sample():
    """ Hand-checkable cohort: 3 treated, 4 controls, one covariate. """
    table = CovariateTable.from_columns({"age": [50, 60, 70, 40, 55, 65, 80]})
    return PooledSample(covariates=table, treatment=[1, 1, 1, 0, 0, 0, 0],
                        outcome=[5.0, 7.0, 9.0, 2.0, 4.0, 6.0, 8.0],
                        subject_id=["t1", "t2", "t3", "c1", "c2", "c3", "c4"])
# file: conftest.py
