# -*- coding: utf-8 -*-
# file: estimators.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# ATT point estimators (PSM, IPW, OM, AIPW), overlap trimming and caliper matching.

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import logit

from .data_model import PooledSample
from .errors import EstimationError, NoOverlapError
from .inference import aligned, control_odds, gamma_from_weights

logger = logging.getLogger(__name__)

METHODS = ("PSM", "IPW", "OM", "AIPW")
Z95 = 1.96
CALIPER_SD = 0.2
# Treated rows scored per block when building the matching distance matrix
_MATCH_BLOCK = 1024


@dataclass(frozen=True)
class AttEstimate:
    """
    One ATT estimate. `variance` is attached after the point estimate (formula,
    EIF or bootstrap, named by `variance_source`); the 95% CI is tau_hat +- 1.96 sqrt(V).
    """
    method: str
    tau_hat: float
    n1_used: int
    n0_used: int
    variance: Optional[float] = None
    variance_source: Optional[str] = None
    gamma_hat: Optional[float] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)

    @property
    def se(self) -> Optional[float]:
        return None if self.variance is None else math.sqrt(self.variance)

    @property
    def ci95(self) -> Optional[Tuple[float, float]]:
        if self.variance is None:
            return None
        half = Z95 * math.sqrt(self.variance)
        return (self.tau_hat - half, self.tau_hat + half)

    def with_variance(self, variance: float, source: str) -> "AttEstimate":
        variance = float(variance)
        if not math.isfinite(variance):
            raise EstimationError(f"{self.method}: non-finite variance from {source}")
        if variance < 0:
            # rounding in sums of squares only
            if variance < -1e-12:
                raise EstimationError(f"{self.method}: negative variance {variance} from {source}")
            variance = 0.0
        return replace(self, variance=variance, variance_source=source)

    def rejects_null(self) -> bool:
        ci = self.ci95
        return ci is not None and (ci[0] > 0 or ci[1] < 0)

    def to_record(self) -> dict:
        ci = self.ci95
        return {"method": self.method, "tau_hat": self.tau_hat, "variance": self.variance,
                "variance_source": self.variance_source, "se": self.se,
                "ci95": None if ci is None else [ci[0], ci[1]],
                "n1_used": self.n1_used, "n0_used": self.n0_used,
                "gamma_hat": self.gamma_hat, "diagnostics": dict(self.diagnostics)}


# --- Overlap ---

@dataclass(frozen=True, eq=False)
class OverlapRegion:
    lower: float
    upper: float
    kept_treated: int
    kept_control: int
    dropped_treated: int
    dropped_control: int
    kept_index: np.ndarray

    def to_record(self) -> dict:
        return {"lower": self.lower, "upper": self.upper,
                "kept_treated": self.kept_treated, "kept_control": self.kept_control,
                "dropped_treated": self.dropped_treated, "dropped_control": self.dropped_control}


def trim_overlap(sample: PooledSample, e_hat: np.ndarray) -> Tuple[PooledSample, OverlapRegion]:
    """
    Keeps rows with e_hat inside [max(min_T, min_C), min(max_T, max_C)].
    Use `region.kept_index` to subset any other per-row vector.
    """
    e_hat = aligned(sample, e_hat, "e_hat")
    e_t, e_c = e_hat[sample.treated], e_hat[sample.control]
    lower = float(max(e_t.min(), e_c.min()))
    upper = float(min(e_t.max(), e_c.max()))
    if lower > upper:
        raise NoOverlapError(f"Propensity ranges do not overlap: treated [{e_t.min():.4g}, {e_t.max():.4g}], "
                             f"control [{e_c.min():.4g}, {e_c.max():.4g}]")
    inside = (e_hat >= lower) & (e_hat <= upper)
    kept_t = int((inside & sample.treated).sum())
    kept_c = int((inside & sample.control).sum())
    if kept_t < 2 or kept_c < 2:
        raise NoOverlapError(f"Overlap region [{lower:.4g}, {upper:.4g}] keeps n1={kept_t}, n0={kept_c}")
    region = OverlapRegion(lower, upper, kept_t, kept_c, sample.n1 - kept_t, sample.n0 - kept_c,
                           np.flatnonzero(inside))
    if inside.all():
        return sample, region
    logger.info("   - Overlap trim [%.4f, %.4f] dropped %d treated, %d control",
                lower, upper, region.dropped_treated, region.dropped_control)
    return sample.take(region.kept_index), region


# --- Matching ---

@dataclass(frozen=True, eq=False)
class MatchResult:
    treated_idx: np.ndarray
    control_idx: np.ndarray
    distance: np.ndarray
    unmatched_treated: int
    caliper: float
    with_replacement: bool

    @property
    def n_matched(self) -> int:
        return int(self.treated_idx.shape[0])

    @property
    def pairs(self):
        return list(zip(self.treated_idx.tolist(), self.control_idx.tolist(), self.distance.tolist()))


def match_on_logit(sample: PooledSample, e_hat: np.ndarray, with_replacement: bool = True,
                   caliper: Optional[float] = None, caliper_sd: float = CALIPER_SD) -> MatchResult:
    """
    1:1 nearest-neighbour matching on |logit e_t - logit e_c|. Equal distances go to
    the lowest control row. Without replacement, treated rows are matched greedily in
    order of descending e_hat. Treated rows with no control inside the caliper stay unmatched.
    """
    e_hat = aligned(sample, e_hat, "e_hat")
    if np.any((e_hat <= 0) | (e_hat >= 1)):
        raise EstimationError("Matching needs propensity scores strictly inside (0, 1)")
    score = logit(e_hat)
    if caliper is None:
        caliper = caliper_sd * float(np.std(score, ddof=1))
    treated = np.flatnonzero(sample.treated)
    control = np.flatnonzero(sample.control)
    s_c = score[control]

    pairs_t, pairs_c, dist = [], [], []
    if with_replacement:
        for start in range(0, treated.shape[0], _MATCH_BLOCK):
            block = treated[start:start + _MATCH_BLOCK]
            gaps = np.abs(score[block][:, None] - s_c[None, :])
            best = np.argmin(gaps, axis=1)
            best_gap = gaps[np.arange(block.shape[0]), best]
            ok = best_gap <= caliper
            pairs_t.extend(block[ok].tolist())
            pairs_c.extend(control[best[ok]].tolist())
            dist.extend(best_gap[ok].tolist())
    else:
        available = np.ones(control.shape[0], dtype=bool)
        order = treated[np.argsort(-e_hat[treated], kind="stable")]
        for i in order:
            if not available.any():
                break
            gaps = np.where(available, np.abs(score[i] - s_c), np.inf)
            j = int(np.argmin(gaps))
            if gaps[j] <= caliper:
                available[j] = False
                pairs_t.append(int(i))
                pairs_c.append(int(control[j]))
                dist.append(float(gaps[j]))
        if pairs_t:
            # report pairs in treated row order
            pos = np.argsort(pairs_t, kind="stable")
            pairs_t = [pairs_t[p] for p in pos]
            pairs_c = [pairs_c[p] for p in pos]
            dist = [dist[p] for p in pos]

    return MatchResult(np.asarray(pairs_t, dtype=int), np.asarray(pairs_c, dtype=int),
                       np.asarray(dist, dtype=float), int(treated.shape[0] - len(pairs_t)),
                       float(caliper), with_replacement)


def psm_att(sample: PooledSample, e_hat: np.ndarray, with_replacement: bool = True,
            caliper: Optional[float] = None,
            caliper_sd: float = CALIPER_SD) -> Tuple[AttEstimate, MatchResult]:
    """ Mean over matched treated of Y_i - Y_m(i). """
    match = match_on_logit(sample, e_hat, with_replacement, caliper, caliper_sd)
    if match.n_matched == 0:
        raise EstimationError(f"PSM: no treated subject has a control within caliper {match.caliper:.4g}")
    gaps = sample.outcome[match.treated_idx] - sample.outcome[match.control_idx]
    estimate = AttEstimate(
        method="PSM", tau_hat=float(np.mean(gaps)), n1_used=match.n_matched,
        n0_used=int(np.unique(match.control_idx).shape[0]),
        diagnostics={"variant": "with_replacement" if with_replacement else "without_replacement",
                     "caliper": match.caliper, "unmatched_treated": match.unmatched_treated,
                     "mean_match_distance": float(np.mean(match.distance))},
    )
    return estimate, match


# --- Weighting and outcome-model estimators ---

def _weighted_contrast(treated_part: np.ndarray, control_resid: np.ndarray, w: np.ndarray,
                       n1: int) -> Tuple[float, float, float]:
    """ (mean(treated_part) - sum(w * control_resid)/n1, first term, correction). """
    first = float(np.sum(treated_part) / n1)
    correction = float(np.sum(w * control_resid) / n1)
    return first - correction, first, correction


def _weight_diagnostics(w: np.ndarray, n1: int) -> dict:
    gamma, raw = gamma_from_weights(w, n1)
    return {"max_weight": float(w.max()), "sum_weights": float(w.sum()),
            "gamma_hat_raw": raw, "n0_effective": float(n1 ** 2 / np.sum(w ** 2))}, gamma


def ipw_att(sample: PooledSample, e_hat: np.ndarray) -> AttEstimate:
    """ tau = mean_T(Y) - (1/n1) sum_C w Y with w = e/(1-e). """
    e_hat = aligned(sample, e_hat, "e_hat")
    w = control_odds(sample, e_hat)
    tau, _, _ = _weighted_contrast(sample.outcome[sample.treated], sample.outcome[sample.control], w, sample.n1)
    diagnostics, gamma = _weight_diagnostics(w, sample.n1)
    return AttEstimate("IPW", tau, sample.n1, sample.n0, gamma_hat=gamma, diagnostics=diagnostics)


def _treated_mu0(sample: PooledSample, mu0_hat: np.ndarray) -> np.ndarray:
    mu0_hat = np.asarray(mu0_hat, dtype=float)
    if mu0_hat.shape == (sample.n,):
        mu_t = mu0_hat[sample.treated]
    elif mu0_hat.shape == (sample.n1,):
        mu_t = mu0_hat
    else:
        raise EstimationError(f"mu0_hat has {mu0_hat.shape[0]} entries; expected n={sample.n} or n1={sample.n1}")
    missing = ~np.isfinite(mu_t)
    if missing.any():
        ids = sample.subject_id[sample.treated][missing]
        raise EstimationError(f"Missing outcome-model prediction for treated subject(s) {ids[:10].tolist()}")
    return mu_t


def om_att(sample: PooledSample, mu0_hat: np.ndarray) -> AttEstimate:
    """ tau = (1/n1) sum_T (Y - mu0_hat). `mu0_hat` may cover all rows or the treated rows only. """
    resid_t = sample.outcome[sample.treated] - _treated_mu0(sample, mu0_hat)
    tau = float(np.sum(resid_t) / sample.n1)
    return AttEstimate("OM", tau, sample.n1, sample.n0,
                       diagnostics={"mean_treated_residual": tau})


def aipw_att(sample: PooledSample, e_hat: np.ndarray, mu0_hat: np.ndarray) -> AttEstimate:
    """ tau = (1/n1) sum_T (Y - mu0) - (1/n1) sum_C w (Y - mu0). """
    e_hat = aligned(sample, e_hat, "e_hat")
    mu0_hat = aligned(sample, mu0_hat, "mu0_hat")
    if not np.all(np.isfinite(mu0_hat)):
        raise EstimationError("AIPW needs an outcome-model prediction for every row")
    w = control_odds(sample, e_hat)
    resid = sample.outcome - mu0_hat
    tau, om_term, correction = _weighted_contrast(resid[sample.treated], resid[sample.control], w, sample.n1)
    om_tau = om_att(sample, mu0_hat).tau_hat
    assert tau == om_tau - correction, "AIPW must equal the plug-in minus the weighted control residuals"
    diagnostics, gamma = _weight_diagnostics(w, sample.n1)
    diagnostics.update({"om_term": om_term, "residual_correction": correction})
    return AttEstimate("AIPW", tau, sample.n1, sample.n0, gamma_hat=gamma, diagnostics=diagnostics)
# file: estimators.py
