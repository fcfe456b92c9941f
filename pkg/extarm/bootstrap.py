# -*- coding: utf-8 -*-
# file: bootstrap.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Arm-stratified nonparametric bootstrap and the subsampling bootstrap for matching.

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .crossfit import run_folds, spawn_seeds
from .data_model import PooledSample
from .errors import BootstrapFailureError, ConfigError, EstimationError, ExtArmError
from .estimators import CALIPER_SD, Z95, psm_att
from .inference import aligned
from .outcome_model import OutcomeRows
from .pipeline import EstimatorSpec, NuisanceFit, estimate, fit_nuisances

logger = logging.getLogger(__name__)

MIN_REPLICATES = 100
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    method: str
    variance: float
    replicates: np.ndarray
    failures: int
    requested: int
    scheme: str
    refit_nuisance: bool
    seed: int
    subsample_size: Optional[int] = None

    def ci95(self, tau_hat: float) -> list:
        """ Normal interval around a point estimate with the resampled variance. """
        half = Z95 * math.sqrt(self.variance)
        return [tau_hat - half, tau_hat + half]

    def to_record(self) -> dict:
        return {"method": self.method, "variance": self.variance, "scheme": self.scheme,
                "replicates": self.requested, "failures": self.failures,
                "refit_nuisance": self.refit_nuisance, "seed": self.seed,
                "subsample_size": self.subsample_size}


def _finish(method: str, values: list, requested: int, scheme: str, refit: bool, seed: int,
            scale: float = 1.0, subsample_size: Optional[int] = None) -> BootstrapResult:
    kept = np.array([v for v in values if v is not None], dtype=float)
    failures = requested - kept.shape[0]
    if failures > MAX_FAILURE_FRACTION * requested:
        raise BootstrapFailureError(
            f"{method} {scheme}: {failures} of {requested} replicates failed (limit {MAX_FAILURE_FRACTION:.0%})")
    if failures:
        logger.warning("%s %s: %d of %d replicates failed and were dropped", method, scheme, failures, requested)
    variance = scale * float(np.var(kept, ddof=1))
    logger.info("-> %s %s variance %.6g over %d replicates", method, scheme, variance, kept.shape[0])
    return BootstrapResult(method, variance, kept, failures, requested, scheme, refit, int(seed), subsample_size)


def stratified_resample(sample: PooledSample, rng: np.random.Generator) -> np.ndarray:
    """ Row indices drawn with replacement within each arm (arm sizes preserved). """
    treated = np.flatnonzero(sample.treated)
    control = np.flatnonzero(sample.control)
    return np.concatenate([rng.choice(treated, treated.shape[0], replace=True),
                           rng.choice(control, control.shape[0], replace=True)])


def bootstrap_variance(sample: PooledSample, spec: EstimatorSpec, method: str, B: int = 1000,
                       refit_nuisance: Optional[bool] = None, seed: int = 0,
                       nuisance: Optional[NuisanceFit] = None,
                       outcome_rows: Optional[OutcomeRows] = None) -> BootstrapResult:
    """
    Variance of one estimator over B arm-stratified resamples. Nuisances are refit on
    every resample (default for PSM, IPW, OM) or held fixed at `nuisance` (default for
    AIPW). Replicates raising an estimation error are dropped; more than 5% failures
    is an error. Replicate seeds derive from `seed`, so results do not depend on
    `spec.plan.n_jobs`.
    """
    method = method.upper()
    if B < MIN_REPLICATES:
        raise ConfigError(f"Bootstrap needs B >= {MIN_REPLICATES}, got {B}")
    if refit_nuisance is None:
        refit_nuisance = method != "AIPW"
    if not refit_nuisance and nuisance is None:
        nuisance = fit_nuisances(sample, spec, outcome_rows)

    def replicate(b: int, replicate_seed: int):
        rows = stratified_resample(sample, np.random.default_rng(replicate_seed))
        boot = sample.take(rows)
        try:
            if refit_nuisance:
                boot_spec = spec.with_plan(replace(spec.plan.child(10_000 + b), n_jobs=1))
                fitted = fit_nuisances(boot, boot_spec, outcome_rows)
            else:
                fitted = nuisance.take(rows)
            run = estimate(boot, fitted, spec, methods=(method,), with_variance=False)
            return run.estimates[method].tau_hat
        except ExtArmError as e:
            logger.debug("Bootstrap replicate %d failed: %s", b, e)
            return None

    values = run_folds(replicate, list(enumerate(spawn_seeds(seed, B))), spec.plan.n_jobs)
    return _finish(method, values, B, "bootstrap", refit_nuisance, seed)


def default_subsample_size(n: int) -> int:
    """ ceil(n^(2/3)). """
    return int(math.ceil(n ** (2.0 / 3.0) - 1e-9))


def subsample_bootstrap_psm(sample: PooledSample, e_hat: np.ndarray, b: Optional[int] = None, B: int = 1000,
                            seed: int = 0, with_replacement: bool = True, caliper_sd: float = CALIPER_SD,
                            n_jobs: int = 1) -> BootstrapResult:
    """
    Subsampling bootstrap for the matching estimator: B subsamples of size b drawn
    without replacement (arm fractions preserved), PSM recomputed on each with the
    propensity scores held fixed, and the subsample variance rescaled by b/n.
    """
    e_hat = aligned(sample, e_hat, "e_hat")
    if B < MIN_REPLICATES:
        raise ConfigError(f"Subsampling bootstrap needs B >= {MIN_REPLICATES}, got {B}")
    b = default_subsample_size(sample.n) if b is None else int(b)
    if b >= sample.n:
        raise ConfigError(f"Subsample size b={b} must be smaller than n={sample.n}")
    b1 = int(round(b * sample.n1 / sample.n))
    b1 = min(max(b1, 2), sample.n1)
    b0 = b - b1
    if b0 < 2 or b0 > sample.n0:
        raise EstimationError(f"Subsample size b={b} is too small to keep 2 subjects per arm")
    treated = np.flatnonzero(sample.treated)
    control = np.flatnonzero(sample.control)

    def replicate(r: int, replicate_seed: int):
        rng = np.random.default_rng(replicate_seed)
        rows = np.sort(np.concatenate([rng.choice(treated, b1, replace=False),
                                       rng.choice(control, b0, replace=False)]))
        try:
            result, _ = psm_att(sample.take(rows), e_hat[rows], with_replacement, caliper_sd=caliper_sd)
            return result.tau_hat
        except ExtArmError as e:
            logger.debug("Subsample %d failed: %s", r, e)
            return None

    values = run_folds(replicate, list(enumerate(spawn_seeds(seed, B))), n_jobs)
    if all(v is None for v in values):
        raise EstimationError(f"Subsample size b={b} is too small: no subsample produced a matched pair")
    return _finish("PSM", values, B, "subsampling", False, seed, scale=b / sample.n, subsample_size=b)
# file: bootstrap.py
