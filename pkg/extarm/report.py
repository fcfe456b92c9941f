# -*- coding: utf-8 -*-
# file: report.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Writes JSON reports and CSV tables for a run, and the manifest that lists them.

import json
import logging
import math
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from .errors import ExtArmError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def to_jsonable(value):
    """ Plain-JSON copy of `value`: numpy scalars/arrays unwrapped, NaN -> null, inf -> "inf". """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    return value


def dumps(payload: dict) -> str:
    # sorted keys and no timestamps: same config + seed gives the same bytes
    return json.dumps(to_jsonable(payload), indent=4, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


class ReportWriter:
    """ Collects every file a command writes into `out_dir` and records it in the manifest. """

    def __init__(self, out_dir, command: str, seed: int, config_hash: str):
        self.out_dir = Path(out_dir)
        self.command = command
        self.seed = int(seed)
        self.config_hash = config_hash
        self.files: List[str] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _register(self, name: str) -> Path:
        if name in self.files:
            raise ExtArmError(f"Report file '{name}' written twice")
        self.files.append(name)
        return self.out_dir / name

    def write_json(self, name: str, payload: Dict) -> Path:
        """ JSON report stamped with command, seed and config hash. """
        target = self._register(name)
        body = {"command": self.command, "seed": self.seed, "config_hash": self.config_hash, **payload}
        with open(target, "w", encoding="utf-8") as f:
            f.write(dumps(body))
        logger.info("-> Wrote %s", target)
        return target

    def write_csv(self, name: str, table: pd.DataFrame) -> Path:
        target = self._register(name)
        table.to_csv(target, index=False, encoding="utf-8", float_format="%.10g", na_rep="NA")
        logger.info("-> Wrote %s (%d rows)", target, len(table))
        return target

    def register_existing(self, name: str) -> None:
        """ Adds a file written by another component (the resolved config) to the manifest. """
        self._register(name)

    def finish(self) -> Path:
        """ Writes the manifest and checks that every declared file exists and is non-empty. """
        target = self.out_dir / MANIFEST_FILE
        manifest = {"command": self.command, "seed": self.seed, "config_hash": self.config_hash,
                    "files": sorted(self.files)}
        with open(target, "w", encoding="utf-8") as f:
            f.write(dumps(manifest))
        broken = [name for name in self.files
                  if not (self.out_dir / name).is_file() or (self.out_dir / name).stat().st_size == 0]
        if broken:
            raise ExtArmError(f"Declared report files missing or empty: {', '.join(broken)}")
        return target


def bias_table(estimates: Dict, reference_method: str = "PSM", expected_tau=None) -> pd.DataFrame:
    """
    One row per estimator: tau_hat, se, CI and the shift relative to a reference
    estimator (PSM by default, else the first one). With `expected_tau` the row also
    carries tau_hat - expected_tau.
    """
    methods = list(estimates)
    if not methods:
        return pd.DataFrame(columns=["method", "tau_hat", "se", "ci_low", "ci_high", "shift_vs_reference"])
    reference = reference_method if reference_method in estimates else methods[0]
    ref_tau = estimates[reference].tau_hat
    rows = []
    for method in methods:
        est = estimates[method]
        ci = est.ci95
        row = {"method": method, "tau_hat": est.tau_hat, "se": est.se,
               "ci_low": None if ci is None else ci[0], "ci_high": None if ci is None else ci[1],
               "n1_used": est.n1_used, "n0_used": est.n0_used, "reference": reference,
               "shift_vs_reference": est.tau_hat - ref_tau}
        if expected_tau is not None:
            row["bias_vs_expected"] = est.tau_hat - float(expected_tau)
        rows.append(row)
    return pd.DataFrame(rows)
# file: report.py
