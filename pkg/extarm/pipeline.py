# -*- coding: utf-8 -*-
# file: pipeline.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# One code path from a pooled sample to ATT estimates: nuisance fits -> estimators -> variances.
# Used by the CLI, the bootstrap (refit mode), Monte Carlo runs and the overlap sweep.

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .crossfit import CrossFitPlan
from .data_model import PooledSample
from .errors import ConfigError
from .estimators import (CALIPER_SD, METHODS, AttEstimate, MatchResult, OverlapRegion, aipw_att, ipw_att,
                         om_att, psm_att, trim_overlap)
from .inference import (KAPPA_METHODS, PSM_FORMS, VarianceComponents, aligned, asymptotic_variance,
                        eif_values, estimate_components)
from .outcome_model import OutcomeModel, OutcomeRows, fit_outcome
from .preprocessing import FEATURE_MAPS
from .propensity import DEFAULT_LAMBDA_GRID, PropensityModel, fit_propensity

logger = logging.getLogger(__name__)

VARIANCE_MODES = ("formula", "eif")
PROPENSITY_METHODS = ("PSM", "IPW", "AIPW")
OUTCOME_METHODS = ("OM", "AIPW")


@dataclass(frozen=True)
class PropensityConfig:
    lambda_grid: Tuple[float, ...] = DEFAULT_LAMBDA_GRID
    features: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.features not in FEATURE_MAPS:
            raise ConfigError(f"Propensity features must be one of {FEATURE_MAPS}")


@dataclass(frozen=True)
class OutcomeConfig:
    kind: str = "ridge"
    hyper_grid: Optional[Tuple[dict, ...]] = None
    velocity: bool = False
    features: str = "identity"

    def __post_init__(self):
        if self.hyper_grid is not None:
            object.__setattr__(self, "hyper_grid", tuple(dict(h) for h in self.hyper_grid))
        if self.features not in FEATURE_MAPS:
            raise ConfigError(f"Outcome features must be one of {FEATURE_MAPS}")


@dataclass(frozen=True)
class EstimatorSpec:
    """ Which estimators to run and how their nuisances and variances are obtained. """
    methods: Tuple[str, ...] = METHODS
    propensity: PropensityConfig = field(default_factory=PropensityConfig)
    outcome: Optional[OutcomeConfig] = field(default_factory=OutcomeConfig)
    plan: CrossFitPlan = field(default_factory=CrossFitPlan)
    trim: bool = True
    trim_psm: bool = False
    psm_with_replacement: bool = True
    caliper_sd: float = CALIPER_SD
    psm_form: str = "sigma"
    kappa_method: str = "rho"
    variance: str = "formula"

    def __post_init__(self):
        methods = tuple(m.upper() for m in self.methods)
        unknown = [m for m in methods if m not in METHODS]
        if unknown or not methods:
            raise ConfigError(f"Unknown or empty estimator list {list(self.methods)}, expected some of {METHODS}")
        object.__setattr__(self, "methods", methods)
        if self.outcome is None and any(m in OUTCOME_METHODS for m in methods):
            needing = [m for m in methods if m in OUTCOME_METHODS]
            raise ConfigError(f"Estimator(s) {needing} need an outcome model block", pointers=["/outcome"])
        if self.variance not in VARIANCE_MODES:
            raise ConfigError(f"Variance mode must be one of {VARIANCE_MODES}")
        if self.psm_form not in PSM_FORMS or self.kappa_method not in KAPPA_METHODS:
            raise ConfigError("Unknown PSM variance form or kappa method")
        if not self.caliper_sd > 0:
            raise ConfigError(f"Caliper multiplier must be positive, got {self.caliper_sd}")

    @property
    def needs_propensity(self) -> bool:
        return any(m in PROPENSITY_METHODS for m in self.methods)

    @property
    def needs_outcome(self) -> bool:
        return self.outcome is not None

    def with_plan(self, plan: CrossFitPlan) -> "EstimatorSpec":
        return replace(self, plan=plan)


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """
    Per-row nuisance predictions aligned with a pooled sample. `source` is
    "fitted" for cross-fitted models or "oracle" for injected true functions.
    """
    e_hat: Optional[np.ndarray] = None
    mu0_hat: Optional[np.ndarray] = None
    propensity_model: Optional[PropensityModel] = None
    outcome_model: Optional[OutcomeModel] = None
    source: str = "fitted"

    def take(self, rows: np.ndarray) -> "NuisanceFit":
        """ Row subset with the models dropped (the predictions are held fixed). """
        return NuisanceFit(None if self.e_hat is None else self.e_hat[rows],
                           None if self.mu0_hat is None else self.mu0_hat[rows],
                           source=self.source)

    def summary(self) -> dict:
        record = {"source": self.source}
        if self.propensity_model is not None:
            record["propensity"] = self.propensity_model.summary()
        if self.outcome_model is not None:
            record["outcome"] = self.outcome_model.summary()
        return record


def fit_nuisances(sample: PooledSample, spec: EstimatorSpec,
                  outcome_rows: Optional[OutcomeRows] = None) -> NuisanceFit:
    """
    Cross-fits e(X) when a propensity-based estimator is requested and mu0(X) when an
    outcome block is configured. `outcome_rows` overrides the training rows of the
    outcome model (an external longitudinal pool); by default the sample's controls are used.
    """
    e_hat = mu0_hat = None
    propensity_model = outcome_model = None
    if spec.needs_propensity:
        propensity_model, e_hat = fit_propensity(sample, spec.plan.child(1), spec.propensity.lambda_grid,
                                                 spec.propensity.features)
    if spec.needs_outcome:
        rows = outcome_rows if outcome_rows is not None else OutcomeRows.from_controls(sample, spec.outcome.velocity)
        outcome_model, _ = fit_outcome(rows, spec.plan.child(2), spec.outcome.kind, spec.outcome.hyper_grid,
                                       spec.outcome.features)
        mu0_hat = outcome_model.predict_mu0(sample)
    return NuisanceFit(e_hat, mu0_hat, propensity_model, outcome_model, "fitted")


@dataclass(frozen=True, eq=False)
class EstimateRun:
    estimates: Dict[str, AttEstimate]
    overlap: Optional[OverlapRegion] = None
    match: Optional[MatchResult] = None
    components: Dict[str, VarianceComponents] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"estimates": [self.estimates[m].to_record() for m in self.estimates],
                "overlap": None if self.overlap is None else self.overlap.to_record(),
                "components": {k: c.to_record() for k, c in self.components.items()}}


def _require(nuisance: NuisanceFit, method: str, e: bool, mu: bool) -> None:
    if e and nuisance.e_hat is None:
        raise ConfigError(f"{method} needs propensity scores")
    if mu and nuisance.mu0_hat is None:
        raise ConfigError(f"{method} needs outcome-model predictions", pointers=["/outcome"])


def estimate(sample: PooledSample, nuisance: NuisanceFit, spec: EstimatorSpec,
             methods: Optional[Sequence[str]] = None, with_variance: bool = True) -> EstimateRun:
    """
    Runs the requested estimators on fixed nuisances. IPW and AIPW (and PSM when
    `trim_psm`) see only rows inside the propensity overlap region when `trim` is on.
    Variances come from the closed-form formulas, or the EIF for AIPW when
    `spec.variance == "eif"`.
    """
    methods = tuple(m.upper() for m in (methods or spec.methods))
    e_hat = aligned(sample, nuisance.e_hat, "e_hat")
    mu0_hat = aligned(sample, nuisance.mu0_hat, "mu0_hat")

    overlap = None
    trimmed = (sample, e_hat, mu0_hat)
    if spec.trim and e_hat is not None and any(m in ("IPW", "AIPW") or (m == "PSM" and spec.trim_psm)
                                               for m in methods):
        trimmed_sample, overlap = trim_overlap(sample, e_hat)
        keep = overlap.kept_index
        trimmed = (trimmed_sample, e_hat[keep], None if mu0_hat is None else mu0_hat[keep])

    components: Dict[str, VarianceComponents] = {}

    def components_for(key: str, s: PooledSample, e: Optional[np.ndarray], mu: Optional[np.ndarray]):
        if key not in components:
            components[key] = estimate_components(s, e, mu, spec.kappa_method)
        return components[key]

    estimates: Dict[str, AttEstimate] = {}
    match = None
    for method in methods:
        use_trim = overlap is not None and (method in ("IPW", "AIPW") or (method == "PSM" and spec.trim_psm))
        s, e, mu = trimmed if use_trim else (sample, e_hat, mu0_hat)
        key = "trimmed" if use_trim else "full"
        if method == "PSM":
            _require(nuisance, method, True, False)
            result, match = psm_att(s, e, spec.psm_with_replacement, caliper_sd=spec.caliper_sd)
        elif method == "IPW":
            _require(nuisance, method, True, False)
            result = ipw_att(s, e)
        elif method == "OM":
            _require(nuisance, method, False, True)
            result = om_att(s, mu)
        else:
            _require(nuisance, method, True, True)
            result = aipw_att(s, e, mu)

        if overlap is not None and use_trim:
            result = replace(result, diagnostics={**result.diagnostics, "overlap": overlap.to_record()})
        if with_variance:
            if method == "AIPW" and spec.variance == "eif":
                variance, source = eif_values(s, e, mu, result.tau_hat).variance, "eif"
            else:
                c = components_for(key, s, e, mu)
                matched = match.control_idx if method == "PSM" else None
                variance = asymptotic_variance(method, c, spec.psm_form, matched)
                source = "formula"
                if method == "IPW" and c.optimistic:
                    result = replace(result, diagnostics={**result.diagnostics, "variance_optimistic": True})
            result = result.with_variance(variance, source)
        estimates[method] = result

    return EstimateRun(estimates, overlap, match, components)


def run_pipeline(sample: PooledSample, spec: EstimatorSpec, outcome_rows: Optional[OutcomeRows] = None,
                 nuisance: Optional[NuisanceFit] = None) -> Tuple[NuisanceFit, EstimateRun]:
    """ fit_nuisances (unless `nuisance` is injected) followed by estimate. """
    if nuisance is None:
        nuisance = fit_nuisances(sample, spec, outcome_rows)
    return nuisance, estimate(sample, nuisance, spec)


def spec_from_settings(block: Mapping, plan: CrossFitPlan) -> EstimatorSpec:
    """ Builds an EstimatorSpec from the validated `estimators` / `propensity` / `outcome` settings. """
    outcome = block.get("outcome")
    return EstimatorSpec(
        methods=tuple(block["estimators"]),
        propensity=PropensityConfig(**block["propensity"]),
        outcome=None if outcome is None else OutcomeConfig(**outcome),
        plan=plan,
        trim=block["inference"]["trim_overlap"],
        trim_psm=block["inference"]["trim_psm"],
        psm_with_replacement=block["inference"]["psm_with_replacement"],
        caliper_sd=block["inference"]["caliper_sd"],
        psm_form=block["inference"]["psm_form"],
        kappa_method=block["inference"]["kappa_method"],
        variance=block["inference"]["variance"],
    )
# file: pipeline.py
