# -*- coding: utf-8 -*-
# file: power_design.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Prospective design: efficiency factor gamma, AIPW power, required n1 and RCT-equivalence ratio.

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.stats import norm

from .crossfit import CrossFitPlan
from .data_model import CovariateTable, PooledSample
from .errors import ConfigError, DataValidationError, PositivityError
from .estimators import trim_overlap
from .inference import control_odds, gamma_from_weights
from .propensity import DEFAULT_LAMBDA_GRID, fit_propensity

logger = logging.getLogger(__name__)

GAMMA_METHODS = ("pilot", "gaussian-smd", "mixed", "mahalanobis", "discrete-chi2", "given")
N1_CAP = 10_000_000
MIN_PILOT_ROWS = 10


@dataclass(frozen=True)
class GammaEstimate:
    value: float
    method: str
    inputs: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in GAMMA_METHODS:
            raise ConfigError(f"Unknown gamma method '{self.method}'")
        if not 0 < self.value <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.value}")

    def to_record(self) -> dict:
        return {"value": self.value, "method": self.method, "inputs": dict(self.inputs)}


# --- gamma estimators ---

def gamma_pilot(proxy_trial: CovariateTable, historical: CovariateTable,
                lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID, plan: Optional[CrossFitPlan] = None,
                features: str = "identity") -> GammaEstimate:
    """
    gamma = (n1^2/n0) / sum_C w^2 with w = e/(1-e) from a propensity model that
    separates proxy-trial rows (A=1) from historical rows (A=0).
    """
    if proxy_trial.n_rows < MIN_PILOT_ROWS or historical.n_rows < MIN_PILOT_ROWS:
        raise DataValidationError(f"Pilot gamma needs >= {MIN_PILOT_ROWS} rows per cohort, "
                                  f"got {proxy_trial.n_rows} and {historical.n_rows}")
    n1, n0 = proxy_trial.n_rows, historical.n_rows
    pooled = PooledSample(
        covariates=proxy_trial.stack(historical),
        treatment=np.r_[np.ones(n1, dtype=np.int8), np.zeros(n0, dtype=np.int8)],
        outcome=np.zeros(n1 + n0),
        subject_id=[f"T{i}" for i in range(n1)] + [f"C{i}" for i in range(n0)],
    )
    _, e_hat = fit_propensity(pooled, plan or CrossFitPlan(), lambda_grid, features)
    trim_overlap(pooled, e_hat)
    w = control_odds(pooled, e_hat)
    gamma, raw = gamma_from_weights(w, n1)
    logger.info("-> Pilot gamma %.4f (raw %.4f) from n1=%d, n0=%d", gamma, raw, n1, n0)
    return GammaEstimate(gamma, "pilot", {"n1": n1, "n0": n0, "sum_w": float(w.sum()),
                                          "sum_w_sq": float(np.sum(w ** 2)), "max_w": float(w.max()),
                                          "raw": raw})


def gamma_smd(smds: Sequence[float], binary_terms: Sequence[Tuple[float, float]] = ()) -> GammaEstimate:
    """
    Gaussian heuristic gamma = exp(-d_M^2) with
    d_M^2 = sum SMD_j^2 + sum (pi1 - pi0)^2 / (pi1 (1 - pi1)) over binary covariates.
    """
    smds = np.asarray(list(smds), dtype=float)
    d2 = float(np.sum(smds ** 2))
    for pi1, pi0 in binary_terms:
        if not (0 < pi1 < 1 and 0 < pi0 < 1):
            raise ConfigError(f"Binary covariate proportions must lie in (0, 1), got pi1={pi1}, pi0={pi0}")
        d2 += (pi1 - pi0) ** 2 / (pi1 * (1 - pi1))
    method = "mixed" if len(binary_terms) else "gaussian-smd"
    return GammaEstimate(math.exp(-d2), method, {"smds": smds.tolist(),
                                                  "binary_terms": [list(t) for t in binary_terms],
                                                  "mahalanobis_sq": d2})


def gamma_mahalanobis(mean_treated: Sequence[float], mean_hist: Sequence[float],
                      covariance: np.ndarray) -> GammaEstimate:
    """ exp(-d_M^2) with the full Mahalanobis distance under a shared covariance. """
    diff = np.asarray(mean_treated, dtype=float) - np.asarray(mean_hist, dtype=float)
    covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
    if covariance.shape != (diff.shape[0], diff.shape[0]):
        raise ConfigError(f"Covariance must be {diff.shape[0]}x{diff.shape[0]}")
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise ConfigError("Covariance is not positive definite") from None
    z = np.linalg.solve(chol, diff)
    d2 = float(z @ z)
    return GammaEstimate(math.exp(-d2), "mahalanobis", {"mahalanobis_sq": d2})


def smd_for_gamma(gamma: float, k: int) -> Tuple[float, ...]:
    """ k equal SMDs s with k s^2 = -ln(gamma), i.e. the scenario that gamma_smd maps to `gamma`. """
    if not 0 < gamma <= 1 or k < 1:
        raise ConfigError(f"Need gamma in (0, 1] and k >= 1, got gamma={gamma}, k={k}")
    return (math.sqrt(-math.log(gamma) / k),) * k


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ConfigError(f"{name} must be a vector of non-negative probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"{name} must sum to 1, sums to {p.sum():.12g}")
    return p


def chi2_divergence(p1: np.ndarray, p0: np.ndarray) -> float:
    """ sum over p0 > 0 of (p1 - p0)^2 / p0; inf when p1 has mass where p0 has none. """
    if np.any((p0 == 0) & (p1 > 0)):
        return math.inf
    support = p0 > 0
    return float(np.sum((p1[support] - p0[support]) ** 2 / p0[support]))


def gamma_discrete_oracle(p1_dist: Sequence[float], p0_dist: Sequence[float]) -> GammaEstimate:
    """ Exact gamma = 1 / (1 + chi^2(P1 || P0)) for finite distributions on shared atoms. """
    p1 = _check_distribution(p1_dist, "p1")
    p0 = _check_distribution(p0_dist, "p0")
    if p1.shape != p0.shape:
        raise ConfigError("p1 and p0 must be defined on the same atoms")
    chi2 = chi2_divergence(p1, p0)
    if math.isinf(chi2):
        atoms = np.flatnonzero((p0 == 0) & (p1 > 0)).tolist()
        raise PositivityError(f"Treated distribution has mass on atoms {atoms} where the control pool has none")
    return GammaEstimate(1.0 / (1.0 + chi2), "discrete-chi2", {"chi2": chi2, "atoms": int(p1.shape[0])})


def discretize_gaussian(mean: float, sd: float, edges: Sequence[float]) -> np.ndarray:
    """
    Probabilities of N(mean, sd^2) on the bins defined by `edges`; the outer bins
    absorb the tails so the result sums to 1.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.shape[0] < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("Bin edges must be a strictly increasing vector of length >= 2")
    if not sd > 0:
        raise ConfigError(f"sd must be positive, got {sd}")
    cdf = norm.cdf(edges, loc=mean, scale=sd)
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.diff(cdf)


# --- Power and sample size ---

@dataclass(frozen=True)
class PowerSpec:
    alpha: float
    tau: float
    n1: float
    n0: float
    gamma: float
    kappa_sq: Optional[float] = None
    sigma0_sq: Optional[float] = None
    rho0: float = 0.0

    def __post_init__(self):
        if not 0 < self.alpha <= 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5], got {self.alpha}")
        if self.n1 < 1 or self.n0 < 1:
            raise ConfigError(f"n1 and n0 must be >= 1, got n1={self.n1}, n0={self.n0}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not -1 <= self.rho0 <= 1:
            raise ConfigError(f"rho0 must lie in [-1, 1], got {self.rho0}")
        if self.kappa_sq is None and self.sigma0_sq is None:
            raise ConfigError("Power spec needs kappa_sq or sigma0_sq (with rho0)")
        if self.conditional_variance < 0:
            raise ConfigError("Conditional outcome variance must be >= 0")

    @property
    def conditional_variance(self) -> float:
        if self.kappa_sq is not None:
            return float(self.kappa_sq)
        return float(self.sigma0_sq) * (1.0 - self.rho0 ** 2)

    def variance(self) -> float:
        """ kappa^2 (1/n1 + 1/(gamma n0)). """
        return self.conditional_variance * (1.0 / self.n1 + 1.0 / (self.gamma * self.n0))

    def to_record(self) -> dict:
        return {"alpha": self.alpha, "tau": self.tau, "n1": self.n1,
                "n0": "inf" if math.isinf(self.n0) else self.n0, "gamma": self.gamma,
                "kappa_sq": self.conditional_variance, "rho0": self.rho0}


def _power_from_variance(tau: float, alpha: float, variance: float) -> float:
    if variance <= 0:
        return 1.0 if tau != 0 else alpha
    z = norm.ppf(alpha / 2.0)
    shift = tau / math.sqrt(variance)
    return float(norm.cdf(z + shift) + norm.cdf(z - shift))


def aipw_power(spec: PowerSpec) -> float:
    """ Two-sided power Phi(z + tau/sqrt(V)) + Phi(z - tau/sqrt(V)), z = Phi^-1(alpha/2). """
    return _power_from_variance(spec.tau, spec.alpha, spec.variance())


@dataclass(frozen=True)
class N1Solution:
    feasible: bool
    n1: Optional[int]
    power: Optional[float]
    reason: str = ""
    max_power: Optional[float] = None

    def to_record(self) -> dict:
        return {"feasible": self.feasible, "n1": self.n1, "power": self.power,
                "reason": self.reason, "max_power": self.max_power}


def solve_n1(spec: PowerSpec, target_power: float) -> N1Solution:
    """
    Smallest integer n1 with aipw_power >= target_power (spec.n1 is ignored).

    Infeasible designs are returned, not raised: when the variance floor
    kappa^2/(gamma n0) keeps power below target for every n1, or when the target
    needs more than 10^7 trial subjects.
    """
    if not spec.alpha < target_power < 1:
        raise ConfigError(f"Target power must lie in (alpha, 1), got {target_power}")

    def power_at(n1: float) -> float:
        return aipw_power(replace(spec, n1=n1))

    floor = 0.0 if math.isinf(spec.n0) else spec.conditional_variance / (spec.gamma * spec.n0)
    max_power = _power_from_variance(spec.tau, spec.alpha, floor)
    if max_power <= target_power:
        reason = (f"variance floor kappa^2/(gamma n0) = {floor:.4g} caps power at {max_power:.4f} "
                  f"< target {target_power}")
        logger.warning("Design infeasible: %s", reason)
        return N1Solution(False, None, None, reason, max_power)
    if power_at(1.0) >= target_power:
        return N1Solution(True, 1, power_at(1.0), max_power=max_power)
    if power_at(float(N1_CAP)) < target_power:
        reason = f"target power {target_power} needs n1 > {N1_CAP}"
        logger.warning("Design infeasible: %s", reason)
        return N1Solution(False, None, None, reason, max_power)

    root = brentq(lambda n: power_at(n) - target_power, 1.0, float(N1_CAP), xtol=1e-6)
    n1 = max(1, int(math.ceil(root)))
    while n1 > 1 and power_at(n1 - 1) >= target_power:
        n1 -= 1
    while power_at(n1) < target_power:
        n1 += 1
    return N1Solution(True, n1, power_at(n1), max_power=max_power)


def rct_ratio(n1: float, n0: float, gamma: float, rho0: float = 0.0) -> float:
    """
    n1 / n_RCT = (1/4)(1 - rho0^2)(1 + n1/(gamma n0)): the fraction of a 1:1 RCT's
    total size that the single-arm + external-control design needs for equal variance.
    """
    if n1 <= 0 or n0 <= 0 or not 0 < gamma <= 1:
        raise ConfigError(f"rct_ratio needs positive sizes and gamma in (0, 1], got n1={n1}, n0={n0}, gamma={gamma}")
    if not -1 <= rho0 <= 1:
        raise ConfigError(f"rho0 must lie in [-1, 1], got {rho0}")
    return 0.25 * (1.0 - rho0 ** 2) * (1.0 + n1 / (gamma * n0))


# --- Augmenting the external pool ---

@dataclass(frozen=True)
class AugmentationResult:
    gamma_a: float
    gamma_new: float
    n_eff_a: float
    n_eff_new: float
    overlap_fraction_b: float

    def to_record(self) -> dict:
        return dict(self.__dict__)


def augmentation_gain(p1: Sequence[float], p0_a: Sequence[float], n_a: int,
                      p0_b: Sequence[float], n_b: int) -> AugmentationResult:
    """
    Effective control size before and after adding n_b subjects from P0B to a pool
    of n_a subjects from P0A. The combined pool follows the size-weighted mixture.
    gamma * n0 never decreases; it stays equal only when P0B puts no mass on P1's support.
    """
    p1 = _check_distribution(p1, "p1")
    p0_a = _check_distribution(p0_a, "p0_a")
    p0_b = _check_distribution(p0_b, "p0_b")
    if n_a < 1 or n_b < 0:
        raise ConfigError(f"Pool sizes must satisfy n_a >= 1, n_b >= 0, got {n_a}, {n_b}")
    mixture = (n_a * p0_a + n_b * p0_b) / (n_a + n_b)
    gamma_new = gamma_discrete_oracle(p1, mixture).value
    gamma_a = 1.0 / (1.0 + chi2_divergence(p1, p0_a))
    n_eff_a = gamma_a * n_a
    n_eff_new = gamma_new * (n_a + n_b)
    if n_eff_new < n_eff_a * (1 - 1e-12) - 1e-12:
        raise AssertionError(f"Effective control size decreased: {n_eff_new} < {n_eff_a}")
    return AugmentationResult(gamma_a, gamma_new, n_eff_a, n_eff_new, float(p0_b[p1 > 0].sum()))


# --- Plot-ready design grids ---

def ratio_grid_vs_n0(n1: float, n0_over_n1: Sequence[float], gammas: Sequence[float],
                     rho0: float = 0.0) -> pd.DataFrame:
    """ One row per (gamma, n0/n1): the RCT-equivalence ratio as the external pool grows. """
    rows = [{"gamma": g, "n0_over_n1": r, "n0": r * n1, "ratio": rct_ratio(n1, r * n1, g, rho0)}
            for g in gammas for r in n0_over_n1]
    return pd.DataFrame(rows, columns=["gamma", "n0_over_n1", "n0", "ratio"])


def ratio_grid_vs_gamma(n1: float, gammas: Sequence[float], n0_over_n1: Sequence[float],
                        rho0: float = 0.0) -> pd.DataFrame:
    """ One row per (n0/n1, gamma): the RCT-equivalence ratio as overlap improves. """
    rows = [{"n0_over_n1": r, "gamma": g, "n0": r * n1, "ratio": rct_ratio(n1, r * n1, g, rho0)}
            for r in n0_over_n1 for g in gammas]
    return pd.DataFrame(rows, columns=["n0_over_n1", "gamma", "n0", "ratio"])


def power_curve(spec: PowerSpec, n1_values: Sequence[float]) -> pd.DataFrame:
    rows = []
    for n1 in n1_values:
        current = replace(spec, n1=float(n1))
        rows.append({"n1": n1, "variance": current.variance(), "power": aipw_power(current)})
    return pd.DataFrame(rows, columns=["n1", "variance", "power"])
# file: power_design.py
