# -*- coding: utf-8 -*-
# file: settings_manager.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Handles loading, validating, resolving and saving run configurations.

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError
from .propensity import DEFAULT_LAMBDA_GRID

logger = logging.getLogger(__name__)

COMMANDS = ("estimate", "design", "simulate", "sweep")
RESOLVED_CONFIG_FILE = "resolved_config.json"

# --- Default settings ---
# Every key a config may contain appears here; anything else is rejected.
# Blocks listed in OPTIONAL_BLOCKS stay None unless the config provides them.
DEFAULT_SETTINGS = {
    "seed": 0,
    "threads": 1,
    "input": {
        "pooled_csv": None,
        "longitudinal_csv": None,
        "pilot_trial_csv": None,
        "pilot_historical_csv": None,
    },
    "schema": {
        "id": "subject_id",
        "treatment": "treatment",
        "outcome": "outcome",
        "covariates": [],
        "baseline_outcome": None,
        "time": None,
        "eligibility": [],
    },
    "longitudinal": {
        "id": "subject_id",
        "time": "time",
        "outcome": "outcome",
        "covariates": [],
        "horizon": 365.0,
        "window": 60.0,
    },
    "estimators": ["PSM", "IPW", "OM", "AIPW"],
    "crossfit": {
        "outer_folds": 5,
        "inner_folds": 3,
    },
    "propensity": {
        "lambda_grid": list(DEFAULT_LAMBDA_GRID),
        "features": "identity",
    },
    "outcome": {
        "kind": "ridge",
        "hyper_grid": None,
        "velocity": False,
        "features": "identity",
    },
    "inference": {
        "variance": "formula",
        "psm_form": "sigma",
        "kappa_method": "rho",
        "trim_overlap": True,
        "trim_psm": False,
        "psm_with_replacement": True,
        "caliper_sd": 0.2,
        "expected_tau": None,
        "bootstrap": {
            "enabled": False,
            "replicates": 1000,
            "subsample_psm": False,
            "subsample_size": None,
        },
    },
    "power": {
        "alpha": 0.05,
        "tau": None,
        "target_power": 0.8,
        "n1": None,
        "n0": None,
        "kappa_sq": None,
        "sigma0_sq": None,
        "rho0": 0.0,
        "gamma": None,
        "smds": None,
        "binary_terms": [],
        "covariance": None,
        "mean_difference": None,
        "n1_grid": [25, 50, 100, 150, 200, 300, 400, 600, 800],
        "n0_over_n1_grid": [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 1000.0],
        "gamma_grid": [0.1, 0.2, 0.29, 0.4, 0.5, 0.64, 0.75, 0.89, 1.0],
    },
    "dgp": {
        "d": 5,
        "mean_shift": None,
        "covariance": None,
        "outcome_coef": None,
        "outcome_intercept": 0.0,
        "nonlinearity": "none",
        "noise_sd": 1.0,
        "tau": 1.0,
        "effect_coef": None,
        "assignment": "two-population",
        "n1": 200,
        "n0": 1000,
        "n": 1200,
        "logistic_coef": None,
        "logistic_intercept": 0.0,
    },
    "monte_carlo": {
        "reps": 1000,
        "propensity_mode": "fitted",
        "outcome_mode": "fitted",
        "n_oracle": 1000000,
    },
    "sweep": {
        "beta_grid": [0.0, 0.5, 1.0, 1.5, 2.0],
        "resamples_per_beta": 20,
    },
}

OPTIONAL_BLOCKS = ("input", "longitudinal", "outcome", "power", "dgp", "sweep")

# Expected types of keys whose default is null.
NULLABLE_TYPES = {
    "/input/pooled_csv": "string",
    "/input/longitudinal_csv": "string",
    "/input/pilot_trial_csv": "string",
    "/input/pilot_historical_csv": "string",
    "/schema/baseline_outcome": "string",
    "/schema/time": "string",
    "/outcome/hyper_grid": "array",
    "/inference/expected_tau": "number",
    "/inference/bootstrap/subsample_size": "integer",
    "/power/tau": "number",
    "/power/n1": "integer",
    "/power/n0": "number_or_inf",
    "/power/kappa_sq": "number",
    "/power/sigma0_sq": "number",
    "/power/gamma": "number",
    "/power/smds": "array",
    "/power/covariance": "array",
    "/power/mean_difference": "array",
    "/dgp/mean_shift": "array",
    "/dgp/covariance": "array",
    "/dgp/outcome_coef": "array",
    "/dgp/effect_coef": "array",
    "/dgp/logistic_coef": "array",
}


def _type_name(value) -> str:
    return type(value).__name__


def _check_value(value, default, pointer: str, errors: List[str]) -> None:
    """ Compares a user value with its default, collecting JSON pointers of problems. """
    if value is None:
        return
    if default is None:
        _check_nullable(value, NULLABLE_TYPES.get(pointer), pointer, errors)
        return
    if isinstance(default, dict):
        if not isinstance(value, dict):
            errors.append(f"{pointer} (expected object, got {_type_name(value)})")
            return
        for key, sub in value.items():
            child = f"{pointer}/{key}"
            if key not in default:
                errors.append(f"{child} (unknown key)")
            else:
                _check_value(sub, default[key], child, errors)
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{pointer} (expected boolean, got {_type_name(value)})")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{pointer} (expected integer, got {_type_name(value)})")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{pointer} (expected number, got {_type_name(value)})")
    elif isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{pointer} (expected string, got {_type_name(value)})")
    elif isinstance(default, list):
        if not isinstance(value, list):
            errors.append(f"{pointer} (expected array, got {_type_name(value)})")


def _check_nullable(value, kind: Optional[str], pointer: str, errors: List[str]) -> None:
    number = not isinstance(value, bool) and isinstance(value, (int, float))
    if kind == "string":
        ok = isinstance(value, str)
    elif kind == "number":
        ok = number
    elif kind == "integer":
        ok = number and not isinstance(value, float)
    elif kind == "number_or_inf":
        ok = number or (isinstance(value, str) and value.lower() == "inf")
        kind = "number or \"inf\""
    elif kind == "array":
        ok = isinstance(value, list)
    else:
        return
    if not ok:
        errors.append(f"{pointer} (expected {kind}, got {_type_name(value)})")


def validate_settings(raw: dict) -> None:
    """ Rejects unknown keys and mistyped values anywhere in `raw`, listing every pointer. """
    if not isinstance(raw, dict):
        raise ConfigError("Configuration must be a JSON object")
    errors: List[str] = []
    _check_value(raw, DEFAULT_SETTINGS, "", errors)
    if errors:
        raise ConfigError("Invalid configuration", pointers=errors)


def _merge(defaults: dict, overrides: dict) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_settings(raw: dict) -> dict:
    """ Validated `raw` merged over a deep copy of DEFAULT_SETTINGS. """
    validate_settings(raw)
    settings = _merge({k: v for k, v in DEFAULT_SETTINGS.items() if k not in OPTIONAL_BLOCKS}, {})
    for block in OPTIONAL_BLOCKS:
        settings[block] = None
    return _merge(settings, {k: (_merge(DEFAULT_SETTINGS[k], v) if k in OPTIONAL_BLOCKS and v is not None else v)
                             for k, v in raw.items()})


def load_settings(config_path) -> dict:
    """ Loads a JSON run configuration and returns the resolved settings. """
    path = Path(config_path)
    logger.info("Attempting to load settings from: %s", path)
    if not path.is_file():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from None
    settings = resolve_settings(raw)
    base = path.parent
    if settings.get("input"):
        for key, value in settings["input"].items():
            if value:
                settings["input"][key] = str((base / value) if not Path(value).is_absolute() else Path(value))
    logger.info("-> Settings load successful.")
    return settings


def apply_overrides(settings: dict, seed: Optional[int] = None, threads: Optional[int] = None) -> dict:
    """ Command-line --seed / --threads take precedence over the config. """
    settings = copy.deepcopy(settings)
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {seed}", pointers=["/seed"])
        settings["seed"] = int(seed)
    if threads is not None:
        settings["threads"] = int(threads)
    if settings["threads"] == 0 or settings["threads"] < -1:
        raise ConfigError("threads must be >= 1 (or -1 for all cores)", pointers=["/threads"])
    return settings


def _missing(settings: dict, pointer: str) -> bool:
    node = settings
    for part in pointer.strip("/").split("/"):
        if not isinstance(node, dict) or node.get(part) is None:
            return True
        node = node[part]
    return False


def check_required(settings: dict, command: str) -> None:
    """ Per-command required blocks; raises ConfigError naming every missing pointer. """
    if command not in COMMANDS:
        raise ConfigError(f"Unknown command '{command}', expected one of {COMMANDS}")
    missing: List[str] = []
    if command == "estimate":
        missing += [p for p in ("/input/pooled_csv", "/schema") if _missing(settings, p)]
        estimators = [str(m).upper() for m in settings["estimators"]]
        needing = [m for m in estimators if m in ("OM", "AIPW")]
        if needing and settings["outcome"] is None:
            raise ConfigError(f"Estimator(s) {needing} need the outcome block", pointers=["/outcome"])
        if settings["longitudinal"] is not None and _missing(settings, "/input/longitudinal_csv"):
            missing.append("/input/longitudinal_csv")
    elif command == "design":
        if settings["power"] is None:
            missing.append("/power")
        else:
            power = settings["power"]
            missing += [p for p in ("/power/tau", "/power/n0") if _missing(settings, p)]
            if power["kappa_sq"] is None and power["sigma0_sq"] is None:
                missing.append("/power/kappa_sq")
            has_pilot = (settings["input"] is not None and settings["input"]["pilot_trial_csv"]
                         and settings["input"]["pilot_historical_csv"])
            has_smd = power["smds"] is not None or bool(power["binary_terms"])
            has_mahalanobis = power["mean_difference"] is not None
            if power["gamma"] is None and not (has_pilot or has_smd or has_mahalanobis):
                raise ConfigError("No gamma source: give /power/gamma, gamma_smd inputs (/power/smds, "
                                  "/power/binary_terms) or pilot CSVs (/input/pilot_trial_csv, "
                                  "/input/pilot_historical_csv)", pointers=["/power/gamma"])
    else:
        if settings["dgp"] is None:
            missing.append("/dgp")
        if command == "sweep" and settings["sweep"] is None:
            missing.append("/sweep")
    if missing:
        raise ConfigError(f"Missing required settings for '{command}'", pointers=missing)


def config_hash(settings: dict) -> str:
    """ SHA-256 over canonical JSON of the resolved settings. """
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_settings(settings: dict, out_dir) -> Path:
    """ Writes the resolved configuration next to the run outputs. """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / RESOLVED_CONFIG_FILE
    logger.info("Attempting to save settings to: %s", target)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(settings, f, indent=4, ensure_ascii=False, sort_keys=True)
        f.write("\n")
    logger.info("-> Settings save successful.")
    return target
# file: settings_manager.py
