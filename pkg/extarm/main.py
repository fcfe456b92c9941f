# -*- coding: utf-8 -*-
# file: main.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Command-line entry point: estimate, design, simulate and sweep.

import argparse
import logging
import math
import sys
import time
import traceback
from typing import List, Optional

import numpy as np

from . import __version__
from .bootstrap import BootstrapResult, bootstrap_variance, subsample_bootstrap_psm
from .crossfit import CrossFitPlan, derive_seed
from .data_model import (ColumnSchema, EligibilityFilter, LongitudinalSchema, apply_eligibility,
                         compute_velocities, load_covariates, load_longitudinal, load_pooled)
from .errors import ConfigError, DgpError, ExtArmError
from .outcome_model import OutcomeRows
from .pipeline import run_pipeline, spec_from_settings
from .power_design import (GammaEstimate, PowerSpec, aipw_power, gamma_mahalanobis, gamma_pilot, gamma_smd,
                           power_curve, ratio_grid_vs_gamma, ratio_grid_vs_n0, solve_n1)
from .report import ReportWriter, bias_table
from .settings_manager import (COMMANDS, RESOLVED_CONFIG_FILE, apply_overrides, check_required, config_hash,
                               load_settings, save_settings)
from .simulation import DgpSpec, mc_table, run_mc, sweep_beta

logger = logging.getLogger("extarm")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
DEFAULT_GRID_N1 = 100


def _plan(settings: dict) -> CrossFitPlan:
    crossfit = settings["crossfit"]
    return CrossFitPlan(outer_folds=crossfit["outer_folds"], inner_folds=crossfit["inner_folds"],
                        seed=settings["seed"], n_jobs=settings["threads"])


def _dgp(settings: dict) -> DgpSpec:
    try:
        return DgpSpec.from_mapping({**settings["dgp"], "seed": settings["seed"]})
    except DgpError as e:
        raise ConfigError(str(e), pointers=["/dgp"]) from None


# --- estimate ---

def _outcome_rows(settings: dict, sample) -> Optional[OutcomeRows]:
    """ Velocity training rows from the longitudinal pool, when one is configured. """
    block = settings["longitudinal"]
    if block is None:
        return None
    if settings["outcome"] is None or not settings["outcome"]["velocity"]:
        raise ConfigError("A longitudinal training pool needs the velocity outcome model",
                          pointers=["/outcome/velocity"])
    covariates, records = load_longitudinal(settings["input"]["longitudinal_csv"],
                                            LongitudinalSchema.from_mapping(block))
    absent = [n for n in sample.covariates.names if n not in covariates.names]
    if absent:
        raise ConfigError(f"Longitudinal pool lacks covariates {absent}", pointers=["/longitudinal/covariates"])
    table = compute_velocities(records, horizon=block["horizon"], window=block["window"])
    logger.info("-> %d velocity rows (%d visits skipped)", table.n_rows, table.skipped_visits)
    return OutcomeRows.from_velocity_table(table, covariates.select(sample.covariates.names))


def _attach_resampled(entry: dict, prefix: str, result: Optional[BootstrapResult]) -> None:
    if result is not None:
        entry[f"{prefix}_variance"] = result.variance
        entry[f"{prefix}_ci"] = result.ci95(entry["tau_hat"])


def cmd_estimate(settings: dict, writer: ReportWriter) -> int:
    schema = ColumnSchema.from_mapping(settings["schema"])
    sample = load_pooled(settings["input"]["pooled_csv"], schema)
    sample, eligibility = apply_eligibility(sample, EligibilityFilter.from_list(settings["schema"]["eligibility"]))
    spec = spec_from_settings(settings, _plan(settings))
    outcome_rows = _outcome_rows(settings, sample)

    nuisance, run = run_pipeline(sample, spec, outcome_rows)
    for est in run.estimates.values():
        logger.info("%s: tau_hat=%.6g se=%s", est.method, est.tau_hat,
                    "n/a" if est.se is None else f"{est.se:.6g}")

    boot_block = settings["inference"]["bootstrap"]
    resampled, subsampled = {}, None
    if boot_block["enabled"]:
        for i, method in enumerate(spec.methods):
            resampled[method] = bootstrap_variance(sample, spec, method, B=boot_block["replicates"],
                                                   seed=derive_seed(settings["seed"], 20, i), nuisance=nuisance,
                                                   outcome_rows=outcome_rows)
        if boot_block["subsample_psm"] and "PSM" in spec.methods:
            subsampled = subsample_bootstrap_psm(sample, nuisance.e_hat, b=boot_block["subsample_size"],
                                                 B=boot_block["replicates"], seed=derive_seed(settings["seed"], 21),
                                                 with_replacement=spec.psm_with_replacement,
                                                 caliper_sd=spec.caliper_sd, n_jobs=settings["threads"])

    record = run.to_record()
    for entry in record["estimates"]:
        _attach_resampled(entry, "bootstrap", resampled.get(entry["method"]))
        if entry["method"] == "PSM":
            _attach_resampled(entry, "subsample", subsampled)
    bootstrap = [r.to_record() for r in resampled.values()]
    if subsampled is not None:
        bootstrap.append(subsampled.to_record())

    writer.write_json("report.json", {
        "cohort": {"n": sample.n, "n1": sample.n1, "n0": sample.n0,
                   "covariates": list(sample.covariates.names)},
        "eligibility": {"n_before": eligibility.n_before, "n_after": eligibility.n_after,
                        "excluded_per_rule": eligibility.excluded_per_rule},
        **record,
        "nuisance": nuisance.summary(),
        "bootstrap": bootstrap,
    })
    writer.write_csv("bias_table.csv", bias_table(run.estimates, expected_tau=settings["inference"]["expected_tau"]))
    return EXIT_OK


# --- design ---

def _gamma(settings: dict) -> GammaEstimate:
    """ gamma from the first available source: given value, pilot cohorts, Mahalanobis, SMDs. """
    power = settings["power"]
    if power["gamma"] is not None:
        return GammaEstimate(float(power["gamma"]), "given")
    inputs = settings["input"] or {}
    if inputs.get("pilot_trial_csv") and inputs.get("pilot_historical_csv"):
        columns = settings["schema"]["covariates"]
        trial = load_covariates(inputs["pilot_trial_csv"], columns)
        historical = load_covariates(inputs["pilot_historical_csv"], columns or trial.names)
        return gamma_pilot(trial, historical, lambda_grid=settings["propensity"]["lambda_grid"],
                           plan=_plan(settings), features=settings["propensity"]["features"])
    if power["mean_difference"] is not None:
        diff = np.asarray(power["mean_difference"], dtype=float)
        covariance = np.eye(diff.shape[0]) if power["covariance"] is None else power["covariance"]
        return gamma_mahalanobis(diff, np.zeros_like(diff), covariance)
    return gamma_smd(power["smds"] or (), [tuple(t) for t in power["binary_terms"]])


def _n0(value) -> float:
    if isinstance(value, str):
        if value.lower() != "inf":
            raise ConfigError(f"n0 must be a number or \"inf\", got '{value}'", pointers=["/power/n0"])
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError("n0 must be a number or \"inf\"", pointers=["/power/n0"])
    return float(value)


def cmd_design(settings: dict, writer: ReportWriter) -> int:
    power = settings["power"]
    gamma = _gamma(settings)
    logger.info("-> gamma=%.4f (%s)", gamma.value, gamma.method)
    n0 = _n0(power["n0"])
    base = PowerSpec(alpha=power["alpha"], tau=float(power["tau"]),
                     n1=float(power["n1"] or DEFAULT_GRID_N1), n0=n0, gamma=gamma.value,
                     kappa_sq=power["kappa_sq"], sigma0_sq=power["sigma0_sq"], rho0=power["rho0"])
    solution = solve_n1(base, power["target_power"])
    achieved = aipw_power(base) if power["n1"] is not None else None
    grid_n1 = float(power["n1"] or solution.n1 or DEFAULT_GRID_N1)

    writer.write_json("design.json", {
        "gamma": gamma.to_record(),
        "power_spec": base.to_record(),
        "power_at_n1": achieved,
        "target_power": power["target_power"],
        "required_n1": solution.to_record(),
        "feasible": solution.feasible,
    })
    writer.write_csv("power_curve.csv", power_curve(base, power["n1_grid"]))
    writer.write_csv("ratio_vs_n0.csv", ratio_grid_vs_n0(grid_n1, power["n0_over_n1_grid"], power["gamma_grid"],
                                                         power["rho0"]))
    writer.write_csv("ratio_vs_gamma.csv", ratio_grid_vs_gamma(grid_n1, power["gamma_grid"],
                                                               power["n0_over_n1_grid"], power["rho0"]))
    if not solution.feasible:
        logger.error("Design infeasible: %s", solution.reason)
        return EXIT_INFEASIBLE
    logger.info("-> Required n1 = %d (power %.4f)", solution.n1, solution.power)
    return EXIT_OK


# --- simulate / sweep ---

def cmd_simulate(settings: dict, writer: ReportWriter) -> int:
    dgp = _dgp(settings)
    spec = spec_from_settings(settings, _plan(settings))
    mc = settings["monte_carlo"]
    results = run_mc(dgp, spec, reps=mc["reps"], seed=settings["seed"], propensity_mode=mc["propensity_mode"],
                     outcome_mode=mc["outcome_mode"], n_oracle=mc["n_oracle"])
    writer.write_csv("mc_results.csv", mc_table(results))
    writer.write_json("simulate.json", {"dgp": dgp.to_record(), "monte_carlo": mc,
                                        "results": [r.to_record() for r in results.values()]})
    return EXIT_OK


def cmd_sweep(settings: dict, writer: ReportWriter) -> int:
    dgp = _dgp(settings)
    spec = spec_from_settings(settings, _plan(settings))
    sweep = settings["sweep"]
    table = sweep_beta(dgp, sweep["beta_grid"], spec, resamples_per_beta=sweep["resamples_per_beta"],
                       seed=settings["seed"], n_oracle=settings["monte_carlo"]["n_oracle"])
    writer.write_csv("sweep_table.csv", table)
    writer.write_json("sweep.json", {"dgp": dgp.to_record(), "sweep": sweep,
                                     "rows": table.to_dict(orient="records")})
    return EXIT_OK


COMMAND_HANDLERS = {
    "estimate": cmd_estimate,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extarm",
                                     description="ATT estimation for single-arm trials with external controls.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=f"run the {command} command")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads (-1 = all cores)")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed, overrides the config")
        verbosity = p.add_mutually_exclusive_group()
        verbosity.add_argument("--verbose", "-v", action="store_true", help="debug logging")
        verbosity.add_argument("--quiet", "-q", action="store_true", help="warnings and errors only")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """ Parses arguments, runs one command and returns its exit code. """
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    started = time.monotonic()
    try:
        settings = apply_overrides(load_settings(args.config), seed=args.seed, threads=args.threads)
        check_required(settings, args.command)
        digest = config_hash(settings)
        logger.info("Running '%s' with seed %d, config hash %s", args.command, settings["seed"], digest)
        save_settings(settings, args.out)
        writer = ReportWriter(args.out, args.command, settings["seed"], digest)
        writer.register_existing(RESOLVED_CONFIG_FILE)
        code = COMMAND_HANDLERS[args.command](settings, writer)
        writer.finish()
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except ExtArmError as e:
        logger.error("%s: %s", type(e).__name__, e)
        logger.debug(traceback.format_exc())
        return EXIT_FAILURE
    except Exception as e:
        logger.error("Unexpected error: %s", e)
        logger.debug(traceback.format_exc())
        return EXIT_FAILURE
    logger.info("-> '%s' finished in %.1fs (exit %d)", args.command, time.monotonic() - started, code)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
# file: main.py
