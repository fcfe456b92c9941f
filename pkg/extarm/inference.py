# -*- coding: utf-8 -*-
# file: inference.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Closed-form asymptotic variances, plug-in variance components and the efficient influence function.

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .data_model import PooledSample
from .errors import (ConfigError, DataValidationError, EstimationError, MissingComponentError,
                     OptimisticVarianceWarning)
from .outcome_model import estimate_rho0

logger = logging.getLogger(__name__)

KAPPA_METHODS = ("rho", "residual")
PSM_FORMS = ("sigma", "kappa", "matched")


def aligned(sample: PooledSample, values: Optional[np.ndarray], name: str) -> Optional[np.ndarray]:
    """ Checks a per-row nuisance vector against the sample and returns it as float. """
    if values is None:
        return None
    values = np.asarray(values, dtype=float)
    if values.shape != (sample.n,):
        raise DataValidationError(f"{name} has {values.shape[0] if values.ndim else 0} entries for {sample.n} rows")
    return values


def control_odds(sample: PooledSample, e_hat: np.ndarray) -> np.ndarray:
    """ w = e/(1-e) on the control rows. """
    e_c = e_hat[sample.control]
    if np.any(e_c >= 1.0) or np.any(e_c <= 0.0):
        raise EstimationError("Propensity scores must lie strictly inside (0, 1) on control rows")
    w = e_c / (1.0 - e_c)
    if not np.all(np.isfinite(w)):
        raise EstimationError("Non-finite propensity odds on control rows")
    return w


def gamma_from_weights(w_control: np.ndarray, n1: int) -> Tuple[float, float]:
    """
    Efficiency factor gamma = (n1^2 / n0) / sum(w^2) over controls.
    Returns (gamma clamped to (0, 1], raw value).
    """
    n0 = w_control.shape[0]
    total = float(np.sum(w_control ** 2))
    if total <= 0 or n0 == 0:
        raise EstimationError("Cannot compute gamma: control weights are all zero")
    raw = (n1 ** 2 / n0) / total
    return float(min(raw, 1.0)), float(raw)


# --- Variance components ---

@dataclass(frozen=True)
class VarianceComponents:
    sigma1_sq: float
    sigma0_sq: float
    n1: int
    n0: float
    kappa_sq: Optional[float] = None
    rho0: Optional[float] = None
    delta: Optional[float] = None
    gamma: Optional[float] = None
    gamma_raw: Optional[float] = None
    kappa_method: str = "rho"
    optimistic: bool = False

    def __post_init__(self):
        for name in ("sigma1_sq", "sigma0_sq", "kappa_sq", "delta"):
            value = getattr(self, name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise EstimationError(f"Variance component {name} must be finite and >= 0, got {value}")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise EstimationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.n1 < 1 or not self.n0 > 0:
            raise EstimationError(f"Sample sizes must be positive, got n1={self.n1}, n0={self.n0}")

    @classmethod
    def from_rho(cls, sigma0_sq: float, rho0: float, **kwargs) -> "VarianceComponents":
        """ kappa^2 = sigma0^2 (1 - rho0^2). """
        return cls(sigma0_sq=sigma0_sq, rho0=rho0, kappa_sq=sigma0_sq * (1.0 - rho0 ** 2), **kwargs)

    def to_record(self) -> dict:
        record = asdict(self)
        if math.isinf(self.n0):
            record["n0"] = "inf"
        return record


def estimate_components(sample: PooledSample, e_hat: Optional[np.ndarray] = None,
                        mu0_hat: Optional[np.ndarray] = None,
                        kappa_method: str = "rho") -> VarianceComponents:
    """
    Plug-in sigma1^2, sigma0^2, rho0, kappa^2, Delta and gamma.

    Delta = V[w mu0 | A=0] / E[w^2 | A=0] over controls. Without an outcome model,
    Delta = 0 and kappa^2 = sigma0^2, which understates the IPW variance; that case is
    flagged `optimistic` and warned about.
    """
    if kappa_method not in KAPPA_METHODS:
        raise ConfigError(f"kappa method must be one of {KAPPA_METHODS}, got '{kappa_method}'")
    e_hat = aligned(sample, e_hat, "e_hat")
    mu0_hat = aligned(sample, mu0_hat, "mu0_hat")
    y_t, y_c = sample.outcome[sample.treated], sample.outcome[sample.control]
    sigma1_sq = float(np.var(y_t, ddof=1))
    sigma0_sq = float(np.var(y_c, ddof=1))

    rho0, kappa_sq, optimistic = 0.0, sigma0_sq, False
    if mu0_hat is not None:
        mu_c = mu0_hat[sample.control]
        rho0 = estimate_rho0(mu_c, y_c)
        if kappa_method == "rho":
            kappa_sq = sigma0_sq * (1.0 - rho0 ** 2)
        else:
            kappa_sq = float(np.mean((y_c - mu_c) ** 2))

    gamma = gamma_raw = delta = None
    if e_hat is not None:
        w = control_odds(sample, e_hat)
        gamma, gamma_raw = gamma_from_weights(w, sample.n1)
        if mu0_hat is not None:
            delta = float(np.var(w * mu0_hat[sample.control], ddof=1) / np.mean(w ** 2))
        else:
            delta, optimistic = 0.0, True
            message = "No outcome model: IPW variance uses Delta = 0 and kappa^2 = sigma0^2 (optimistic)"
            logger.warning(message)
            warnings.warn(message, OptimisticVarianceWarning, stacklevel=2)

    return VarianceComponents(sigma1_sq=sigma1_sq, sigma0_sq=sigma0_sq, n1=sample.n1, n0=sample.n0,
                              kappa_sq=kappa_sq, rho0=rho0, delta=delta, gamma=gamma, gamma_raw=gamma_raw,
                              kappa_method=kappa_method, optimistic=optimistic)


def _need(c: VarianceComponents, method: str, *names: str):
    values = []
    for name in names:
        value = getattr(c, name)
        if value is None:
            raise MissingComponentError(method, name)
        values.append(value)
    return values


def asymptotic_variance(method: str, components: VarianceComponents, psm_form: str = "sigma",
                        matched_controls: Optional[np.ndarray] = None) -> float:
    """
    Closed-form large-sample variance of an ATT estimator:

        PSM   2 sigma1^2 / n1          (psm_form="kappa": 2 kappa^2 / n1)
        IPW   sigma1^2 / n1 + (kappa^2 + Delta) / (gamma n0)
        OM    kappa^2 / n1
        AIPW  kappa^2 (1/n1 + 1/(gamma n0))

    psm_form="matched" charges each control for its reuse: with m matched treated and
    K_j the number of times control j is used,

        PSM   kappa^2 (m + sum_j K_j^2) / m^2

    which equals the kappa form when no control is reused.
    `matched_controls` holds the control row of every matched pair.

    n0 may be math.inf for the large-pool limit.
    """
    c = components
    method = method.upper()
    if method == "PSM":
        if psm_form not in PSM_FORMS:
            raise ConfigError(f"PSM variance form must be one of {PSM_FORMS}, got '{psm_form}'")
        if psm_form == "kappa":
            (kappa_sq,) = _need(c, method, "kappa_sq")
            return 2.0 * kappa_sq / c.n1
        if psm_form == "matched":
            (kappa_sq,) = _need(c, method, "kappa_sq")
            if matched_controls is None or len(matched_controls) == 0:
                raise MissingComponentError(method, "matched_controls")
            _, reuse = np.unique(np.asarray(matched_controls), return_counts=True)
            m = float(len(matched_controls))
            return kappa_sq * (m + float(np.sum(reuse.astype(float) ** 2))) / m ** 2
        return 2.0 * c.sigma1_sq / c.n1
    if method == "IPW":
        kappa_sq, delta, gamma = _need(c, method, "kappa_sq", "delta", "gamma")
        return c.sigma1_sq / c.n1 + (kappa_sq + delta) / (gamma * c.n0)
    if method == "OM":
        (kappa_sq,) = _need(c, method, "kappa_sq")
        return kappa_sq / c.n1
    if method == "AIPW":
        kappa_sq, gamma = _need(c, method, "kappa_sq", "gamma")
        return kappa_sq * (1.0 / c.n1 + 1.0 / (gamma * c.n0))
    raise ConfigError(f"Unknown estimator '{method}'")


# --- Efficient influence function ---

@dataclass(frozen=True, eq=False)
class EifVector:
    phi: np.ndarray
    tau_ref: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.phi))

    @property
    def variance(self) -> float:
        """ Empirical variance of the estimator: var(phi) / n. """
        return float(np.var(self.phi, ddof=1) / self.phi.shape[0])


def eif_values(sample: PooledSample, e_hat: np.ndarray, mu0_hat: np.ndarray, tau_hat: float) -> EifVector:
    """
    phi = (A/p1)(Y - mu0 - tau) - ((1-A)/p1) w (Y - mu0), with p1 = n1/n and w = e/(1-e).
    At tau = tau_AIPW the sample mean of phi is zero.
    """
    e_hat = aligned(sample, e_hat, "e_hat")
    mu0_hat = aligned(sample, mu0_hat, "mu0_hat")
    p1 = sample.p1
    resid = sample.outcome - mu0_hat
    phi = np.zeros(sample.n)
    treated, control = sample.treated, sample.control
    phi[treated] = (resid[treated] - tau_hat) / p1
    phi[control] = -control_odds(sample, e_hat) * resid[control] / p1
    return EifVector(phi, float(tau_hat))


def standardized_bias(tau_hat: float, tau_expected: float, sd_hist: float) -> float:
    """ |tau_hat - tau_expected| / sd_hist. """
    if not sd_hist > 0:
        raise EstimationError(f"Standardized bias needs a positive outcome SD, got {sd_hist}")
    return abs(tau_hat - tau_expected) / sd_hist
# file: inference.py
