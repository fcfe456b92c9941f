# -*- coding: utf-8 -*-
# file: data_model.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Cohort containers, CSV loading, eligibility filtering and velocity rows.

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (ConfigError, DataFormatError, DataValidationError, DegenerateCohortError,
                     SkippedVisitWarning)

logger = logging.getLogger(__name__)

# Cell contents read as "missing" in every CSV input
MISSING_TOKENS = ("", "NA")
# Suffix separator for duplicated subjects produced by resampling ("p17#2")
COPY_SEPARATOR = "#"

PathLike = Union[str, Path]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# --- Covariates ---

@dataclass(frozen=True, eq=False)
class CovariateTable:
    """
    Baseline covariates with an explicit missingness mask.

    `values` holds NaN in missing cells, but `missing` is the authoritative
    record: an observed 0.0 and a missing cell are never confused.
    """
    names: Tuple[str, ...]
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        missing = np.array(self.missing, dtype=bool).reshape(values.shape)

        if not names:
            raise DataValidationError("Covariate table needs at least one column")
        if any(not n.strip() for n in names):
            raise DataValidationError("Covariate column names must be non-empty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataValidationError(f"Duplicate covariate columns {dupes}")
        if values.shape[1] != len(names):
            raise DataValidationError(
                f"Covariate table has {values.shape[1]} value columns for {len(names)} names")
        if values.shape[0] < 1:
            raise DataValidationError("Covariate table needs at least one row")

        missing = missing | ~np.isfinite(values)
        values[missing] = np.nan
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "missing", _frozen(missing))

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[Optional[float]]]) -> "CovariateTable":
        """ Builds a table from name -> values; None or NaN mark a missing cell. """
        names = list(columns)
        raw = [[np.nan if v is None else float(v) for v in columns[n]] for n in names]
        lengths = {len(col) for col in raw}
        if len(lengths) > 1:
            raise DataValidationError(f"Covariate columns have unequal lengths {sorted(lengths)}")
        values = np.array(raw, dtype=float).T if raw else np.empty((0, 0))
        table = cls(tuple(names), values, ~np.isfinite(values))
        table.check_observed()
        return table

    @classmethod
    def from_array(cls, names: Sequence[str], values: np.ndarray) -> "CovariateTable":
        values = np.asarray(values, dtype=float)
        return cls(tuple(names), values, ~np.isfinite(values))

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def has_missing(self) -> bool:
        return bool(self.missing.any())

    def check_observed(self) -> None:
        """ Rejects columns that have no observed cell at all. """
        empty = [n for n, col in zip(self.names, self.missing.T) if col.all()]
        if empty:
            raise DataValidationError(f"Covariate column(s) entirely missing: {empty}")

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise DataValidationError(f"Unknown covariate column '{name}'") from None

    def column_missing(self, name: str) -> np.ndarray:
        return self.missing[:, self.names.index(name)]

    def take(self, rows: np.ndarray) -> "CovariateTable":
        rows = np.asarray(rows, dtype=int)
        return CovariateTable(self.names, self.values[rows], self.missing[rows])

    def select(self, names: Sequence[str]) -> "CovariateTable":
        missing_names = [n for n in names if n not in self.names]
        if missing_names:
            raise DataValidationError(f"Covariate column(s) not present: {missing_names}")
        idx = [self.names.index(n) for n in names]
        return CovariateTable(tuple(names), self.values[:, idx], self.missing[:, idx])

    def stack(self, other: "CovariateTable") -> "CovariateTable":
        """ Row-wise concatenation; `other` is aligned on this table's column names. """
        other = other.select(self.names)
        return CovariateTable(self.names,
                              np.vstack([self.values, other.values]),
                              np.vstack([self.missing, other.missing]))

    def squared(self) -> "CovariateTable":
        """ Element-wise squares, used to build functional-form misspecified fits. """
        return CovariateTable(tuple(f"{n}^2" for n in self.names), self.values ** 2, self.missing)

    def equals(self, other: "CovariateTable") -> bool:
        return (self.names == other.names
                and np.array_equal(self.missing, other.missing)
                and np.array_equal(self.values, other.values, equal_nan=True))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.names))


# --- Pooled trial + external control sample ---

@dataclass(frozen=True, eq=False)
class PooledSample:
    """
    Trial subjects (treatment == 1) pooled with external controls (treatment == 0).

    `baseline` and `elapsed` are optional per-row baseline outcome and time since
    baseline; the velocity outcome model needs both to predict at the endpoint.
    """
    covariates: CovariateTable
    treatment: np.ndarray
    outcome: np.ndarray
    subject_id: np.ndarray
    baseline: Optional[np.ndarray] = None
    elapsed: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.covariates.n_rows
        treatment = np.asarray(self.treatment)
        outcome = np.array(self.outcome, dtype=float)
        ids = np.array([str(s) for s in self.subject_id], dtype=object)

        for name, arr in (("treatment", treatment), ("outcome", outcome), ("subject_id", ids)):
            if arr.shape != (n,):
                raise DataValidationError(f"{name} has {arr.shape[0] if arr.ndim else 0} entries for {n} rows")
        bad = np.flatnonzero(~np.isin(treatment, (0, 1)))
        if bad.size:
            raise DataValidationError("Treatment value outside {0,1}", rows=(bad + 1).tolist())
        bad = np.flatnonzero(~np.isfinite(outcome))
        if bad.size:
            raise DataValidationError("Outcome missing or non-finite", rows=(bad + 1).tolist())
        dupes = pd.Series(ids).duplicated(keep=False).to_numpy()
        if dupes.any():
            raise DataValidationError("Duplicate subject_id", rows=(np.flatnonzero(dupes) + 1).tolist())

        treatment = treatment.astype(np.int8)
        n1 = int(treatment.sum())
        if n1 < 2 or n - n1 < 2:
            raise DegenerateCohortError(
                f"Need at least 2 treated and 2 control subjects, got n1={n1}, n0={n - n1}")

        object.__setattr__(self, "treatment", _frozen(treatment))
        object.__setattr__(self, "outcome", _frozen(outcome))
        object.__setattr__(self, "subject_id", _frozen(ids))
        for name in ("baseline", "elapsed"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=float)
                if arr.shape != (n,):
                    raise DataValidationError(f"{name} has wrong length")
                object.__setattr__(self, name, _frozen(arr))

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    @property
    def n1(self) -> int:
        return int(self.treatment.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def p1(self) -> float:
        return self.n1 / self.n

    @property
    def treated(self) -> np.ndarray:
        return self.treatment == 1

    @property
    def control(self) -> np.ndarray:
        return self.treatment == 0

    def base_ids(self) -> np.ndarray:
        """ Subject ids with any resampling copy suffix removed. """
        return np.array([s.split(COPY_SEPARATOR, 1)[0] for s in self.subject_id], dtype=object)

    def take(self, rows: np.ndarray) -> "PooledSample":
        """ Row subset; repeated rows get unique ids "<id>#<k>" so ids stay unique. """
        rows = np.asarray(rows, dtype=int)
        copy_number = pd.Series(rows).groupby(rows).cumcount().to_numpy()
        base = self.subject_id[rows]
        ids = np.array([s if k == 0 else f"{s}{COPY_SEPARATOR}{k}" for s, k in zip(base, copy_number)],
                       dtype=object)
        return PooledSample(
            covariates=self.covariates.take(rows),
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            subject_id=ids,
            baseline=None if self.baseline is None else self.baseline[rows],
            elapsed=None if self.elapsed is None else self.elapsed[rows],
        )

    def with_outcome(self, outcome: np.ndarray) -> "PooledSample":
        return PooledSample(self.covariates, self.treatment, outcome, self.subject_id,
                            self.baseline, self.elapsed)

    def with_covariates(self, covariates: CovariateTable) -> "PooledSample":
        return PooledSample(covariates, self.treatment, self.outcome, self.subject_id,
                            self.baseline, self.elapsed)

    def equals(self, other: "PooledSample") -> bool:
        def same_optional(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)
        return (self.covariates.equals(other.covariates)
                and np.array_equal(self.treatment, other.treatment)
                and np.array_equal(self.outcome, other.outcome)
                and list(self.subject_id) == list(other.subject_id)
                and same_optional(self.baseline, other.baseline)
                and same_optional(self.elapsed, other.elapsed))


@dataclass(frozen=True)
class ColumnSchema:
    """ Column roles of a pooled CSV file. Empty `covariates` means "every other column". """
    id: str
    treatment: str
    outcome: str
    covariates: Tuple[str, ...] = ()
    baseline_outcome: Optional[str] = None
    time: Optional[str] = None

    def __post_init__(self):
        roles = [self.id, self.treatment, self.outcome, self.baseline_outcome, self.time]
        roles = [r for r in roles if r is not None]
        if any(not isinstance(r, str) or not r for r in roles):
            raise ConfigError("Schema role names must be non-empty strings", pointers=["/schema"])
        if len(set(roles)) != len(roles):
            raise ConfigError(f"Schema assigns one column to several roles {roles}", pointers=["/schema"])
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "ColumnSchema":
        return cls(id=mapping["id"], treatment=mapping["treatment"], outcome=mapping["outcome"],
                   covariates=tuple(mapping.get("covariates") or ()),
                   baseline_outcome=mapping.get("baseline_outcome"),
                   time=mapping.get("time"))

    def role_columns(self) -> List[str]:
        return [c for c in (self.id, self.treatment, self.outcome, self.baseline_outcome, self.time) if c]


def _read_raw_csv(csv_path: PathLike) -> pd.DataFrame:
    path = Path(csv_path)
    if not path.is_file():
        raise DataFormatError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False,
                            skipinitialspace=True, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"CSV file is empty: {path}") from None
    except pd.errors.ParserError as e:
        raise DataFormatError(f"Could not parse {path.name}: {e}") from None
    if frame.shape[0] == 0:
        raise DataFormatError(f"CSV file has a header but no data rows: {path}")
    return frame


def _parse_numeric(frame: pd.DataFrame, column: str) -> Tuple[np.ndarray, np.ndarray]:
    """ Returns (values, missing) for a column; raises on the first non-numeric cell. """
    if column not in frame.columns:
        raise DataFormatError("Column missing from CSV header", column=column)
    text = frame[column].str.strip()
    missing = text.isin(MISSING_TOKENS).to_numpy()
    values = pd.to_numeric(text.where(~text.isin(MISSING_TOKENS)), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~missing & ~np.isfinite(values))
    if bad.size:
        row = int(bad[0])
        raise DataFormatError(f"Non-numeric value '{frame[column].iloc[row]}'", row=row + 1, column=column)
    return values, missing


def _parse_ids(frame: pd.DataFrame, column: str) -> np.ndarray:
    if column not in frame.columns:
        raise DataFormatError("Column missing from CSV header", column=column)
    ids = frame[column].str.strip().to_numpy(dtype=object)
    empty = np.flatnonzero([s in MISSING_TOKENS for s in ids])
    if empty.size:
        raise DataValidationError("Empty subject id", rows=(empty + 1).tolist())
    reserved = np.flatnonzero([COPY_SEPARATOR in s for s in ids])
    if reserved.size:
        raise DataValidationError(f"Subject id contains reserved character '{COPY_SEPARATOR}'",
                                  rows=(reserved + 1).tolist())
    return ids


def load_pooled(csv_path: PathLike, schema: ColumnSchema) -> PooledSample:
    """
    Loads a pooled trial + external control CSV.

    Missing covariate cells ("" or "NA") are kept as missing; row order is preserved.
    Error row numbers are 1-based data rows (the header is not counted).
    """
    logger.info("Attempting to load pooled sample from: %s", csv_path)
    frame = _read_raw_csv(csv_path)

    ids = _parse_ids(frame, schema.id)
    dupes = pd.Series(ids).duplicated(keep=False).to_numpy()
    if dupes.any():
        raise DataValidationError("Duplicate subject id", rows=(np.flatnonzero(dupes) + 1).tolist())

    treatment, t_missing = _parse_numeric(frame, schema.treatment)
    bad = np.flatnonzero(t_missing | ~np.isin(np.nan_to_num(treatment, nan=-1.0), (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(f"Treatment column '{schema.treatment}' has value outside {{0,1}}",
                                  rows=(bad + 1).tolist())

    outcome, y_missing = _parse_numeric(frame, schema.outcome)
    if y_missing.any():
        raise DataValidationError(f"Outcome column '{schema.outcome}' has missing values",
                                  rows=(np.flatnonzero(y_missing) + 1).tolist())

    optional = {}
    for role, column in (("baseline", schema.baseline_outcome), ("elapsed", schema.time)):
        if column:
            values, miss = _parse_numeric(frame, column)
            if miss.any():
                raise DataValidationError(f"Column '{column}' has missing values",
                                          rows=(np.flatnonzero(miss) + 1).tolist())
            optional[role] = values

    covariate_names = list(schema.covariates) or [c for c in frame.columns if c not in schema.role_columns()]
    if not covariate_names:
        raise DataFormatError("No covariate columns in CSV")
    parsed = [_parse_numeric(frame, c) for c in covariate_names]
    covariates = CovariateTable(tuple(covariate_names),
                                np.column_stack([p[0] for p in parsed]),
                                np.column_stack([p[1] for p in parsed]))
    covariates.check_observed()

    sample = PooledSample(covariates=covariates, treatment=treatment.astype(np.int8), outcome=outcome,
                          subject_id=ids, **optional)
    logger.info("-> Loaded %d rows (n1=%d, n0=%d, %d covariates, %.1f%% cells missing).",
                sample.n, sample.n1, sample.n0, covariates.n_cols, 100.0 * covariates.missing.mean())
    return sample


def load_covariates(csv_path: PathLike, columns: Sequence[str] = (),
                    exclude: Sequence[str] = ()) -> CovariateTable:
    """ Covariate-only CSV (a pilot cohort). Empty `columns` means every column not in `exclude`. """
    logger.info("Attempting to load covariates from: %s", csv_path)
    frame = _read_raw_csv(csv_path)
    names = list(columns) or [c for c in frame.columns if c not in exclude]
    if not names:
        raise DataFormatError("No covariate columns in CSV")
    parsed = [_parse_numeric(frame, c) for c in names]
    table = CovariateTable(tuple(names), np.column_stack([p[0] for p in parsed]),
                           np.column_stack([p[1] for p in parsed]))
    table.check_observed()
    logger.info("-> Loaded %d rows, %d covariates.", table.n_rows, table.n_cols)
    return table


def save_pooled(sample: PooledSample, csv_path: PathLike,
                schema: Optional[ColumnSchema] = None) -> ColumnSchema:
    """ Writes `sample` as CSV (missing cells as "NA") and returns the schema that reloads it. """
    if schema is None:
        schema = ColumnSchema(id="subject_id", treatment="treatment", outcome="outcome",
                              covariates=sample.covariates.names,
                              baseline_outcome="baseline" if sample.baseline is not None else None,
                              time="elapsed" if sample.elapsed is not None else None)
    frame = pd.DataFrame({schema.id: sample.subject_id,
                          schema.treatment: sample.treatment.astype(int),
                          schema.outcome: sample.outcome})
    if schema.baseline_outcome:
        frame[schema.baseline_outcome] = sample.baseline
    if schema.time:
        frame[schema.time] = sample.elapsed
    covariates = sample.covariates.to_frame()
    for name in sample.covariates.names:
        frame[name] = covariates[name]
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False, na_rep="NA", encoding="utf-8")
    logger.info("-> Pooled sample written to %s", csv_path)
    return ColumnSchema(id=schema.id, treatment=schema.treatment, outcome=schema.outcome,
                        covariates=sample.covariates.names,
                        baseline_outcome=schema.baseline_outcome, time=schema.time)


# --- Eligibility ---

RULE_KINDS = ("min", "max", "in_set")


@dataclass(frozen=True)
class EligibilityRule:
    column: str
    kind: str
    threshold: Optional[float] = None
    values: Tuple[float, ...] = ()

    def __post_init__(self):
        kind = self.kind.replace("-", "_")
        if kind not in RULE_KINDS:
            raise ConfigError(f"Unknown eligibility rule kind '{self.kind}'", pointers=["/schema/eligibility"])
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if kind in ("min", "max") and self.threshold is None:
            raise ConfigError(f"Rule '{kind}' on '{self.column}' needs a threshold", pointers=["/schema/eligibility"])
        if kind == "in_set" and not self.values:
            raise ConfigError(f"Rule 'in_set' on '{self.column}' needs values", pointers=["/schema/eligibility"])

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "EligibilityRule":
        return cls(column=mapping["column"], kind=mapping["kind"],
                   threshold=mapping.get("threshold"), values=tuple(mapping.get("values") or ()))

    @property
    def label(self) -> str:
        if self.kind == "min":
            return f"{self.column}>={self.threshold:g}"
        if self.kind == "max":
            return f"{self.column}<={self.threshold:g}"
        return f"{self.column} in {{{', '.join(f'{v:g}' for v in self.values)}}}"

    def holds(self, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
        """ Row mask where the rule holds; missing cells never pass. """
        if self.kind == "min":
            ok = values >= self.threshold
        elif self.kind == "max":
            ok = values <= self.threshold
        else:
            ok = np.isin(values, self.values)
        return ok & ~missing


@dataclass(frozen=True)
class EligibilityFilter:
    rules: Tuple[EligibilityRule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        bounds: Dict[str, Dict[str, float]] = {}
        for rule in self.rules:
            if rule.kind in ("min", "max"):
                bounds.setdefault(rule.column, {})[rule.kind] = float(rule.threshold)
        for column, b in bounds.items():
            if "min" in b and "max" in b and b["min"] > b["max"]:
                raise ConfigError(f"Eligibility on '{column}' has min {b['min']:g} > max {b['max']:g}",
                                  pointers=["/schema/eligibility"])

    @classmethod
    def from_list(cls, rules: Sequence[Mapping]) -> "EligibilityFilter":
        return cls(tuple(EligibilityRule.from_mapping(r) for r in rules))


@dataclass(frozen=True)
class EligibilityReport:
    n_before: int
    n_after: int
    excluded_per_rule: Dict[str, int] = field(default_factory=dict)


def apply_eligibility(sample: PooledSample,
                      filt: EligibilityFilter) -> Tuple[PooledSample, EligibilityReport]:
    """
    Keeps rows satisfying every rule. Each excluded row is counted against the
    first rule it fails, so the per-rule counts add up to the total exclusion.
    """
    unknown = [r.column for r in filt.rules if r.column not in sample.covariates.names]
    if unknown:
        raise ConfigError(f"Eligibility rules reference unknown columns {unknown}", pointers=["/schema/eligibility"])
    if not filt.rules:
        return sample, EligibilityReport(sample.n, sample.n)

    keep = np.ones(sample.n, dtype=bool)
    excluded: Dict[str, int] = {}
    for rule in filt.rules:
        passes = rule.holds(sample.covariates.column(rule.column),
                            sample.covariates.column_missing(rule.column))
        newly_dropped = keep & ~passes
        excluded[rule.label] = int(newly_dropped.sum())
        keep &= passes

    if keep.all():
        return sample, EligibilityReport(sample.n, sample.n, excluded)

    kept_t = int((keep & sample.treated).sum())
    kept_c = int((keep & sample.control).sum())
    if kept_t < 2 or kept_c < 2:
        raise DegenerateCohortError(
            f"Eligibility leaves n1={kept_t}, n0={kept_c}; at least 2 of each are required")
    filtered = sample.take(np.flatnonzero(keep))
    for label, count in excluded.items():
        logger.info("   - Eligibility rule %s excluded %d row(s).", label, count)
    return filtered, EligibilityReport(sample.n, filtered.n, excluded)


# --- Longitudinal records and velocities ---

@dataclass(frozen=True)
class LongitudinalRecord:
    """
    One subject's trajectory. `covariate_row` indexes the covariate table the
    record was loaded with. A visit at t == t0 is tolerated here and skipped
    (with a warning) by compute_velocities.
    """
    subject_id: str
    t0: float
    y0: float
    visits: Tuple[Tuple[float, float], ...]
    covariate_row: int

    def __post_init__(self):
        if not np.isfinite(self.y0):
            raise DataValidationError(f"Subject '{self.subject_id}' has no observed baseline outcome")
        visits = tuple(sorted((float(t), float(y)) for t, y in self.visits))
        times = [t for t, _ in visits]
        if len(set(times)) != len(times):
            raise DataValidationError(f"Subject '{self.subject_id}' has duplicate visit times")
        if times and times[0] < self.t0:
            raise DataValidationError(f"Subject '{self.subject_id}' has a visit before baseline")
        object.__setattr__(self, "visits", visits)


@dataclass(frozen=True, eq=False)
class VelocityTable:
    """ Training rows (one per post-baseline visit) plus one evaluation row per subject. """
    subject_id: np.ndarray
    covariate_row: np.ndarray
    velocity: np.ndarray
    time: np.ndarray
    elapsed: np.ndarray
    baseline: np.ndarray
    eval_subject_id: np.ndarray
    eval_covariate_row: np.ndarray
    eval_time: np.ndarray
    eval_elapsed: np.ndarray
    eval_outcome: np.ndarray
    eval_baseline: np.ndarray
    skipped_visits: int = 0

    @property
    def n_rows(self) -> int:
        return int(self.velocity.shape[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"subject_id": self.subject_id, "covariate_row": self.covariate_row,
                             "v": self.velocity, "t": self.time, "elapsed": self.elapsed})


def compute_velocities(records: Sequence[LongitudinalRecord], horizon: float,
                       window: float = 60.0) -> VelocityTable:
    """
    v = (y(t) - y0) / (t - t0) for every visit. The evaluation visit of a subject is
    the one whose elapsed time is nearest to `horizon` within +-`window` (earlier
    visit on ties); subjects without such a visit have no evaluation row.
    """
    if not window > 0:
        raise DataValidationError(f"Evaluation window must be positive, got {window}")

    train = {"id": [], "row": [], "v": [], "t": [], "dt": [], "y0": []}
    evaluation = {"id": [], "row": [], "t": [], "dt": [], "y": [], "y0": []}
    skipped = 0
    for rec in records:
        best = None
        for t, y in rec.visits:
            dt = t - rec.t0
            if dt <= 0:
                skipped += 1
                continue
            train["id"].append(rec.subject_id)
            train["row"].append(rec.covariate_row)
            train["v"].append((y - rec.y0) / dt)
            train["t"].append(t)
            train["dt"].append(dt)
            train["y0"].append(rec.y0)
            distance = abs(dt - horizon)
            if distance <= window and (best is None or distance < best[0]):
                best = (distance, t, dt, y)
        if best is not None:
            evaluation["id"].append(rec.subject_id)
            evaluation["row"].append(rec.covariate_row)
            evaluation["t"].append(best[1])
            evaluation["dt"].append(best[2])
            evaluation["y"].append(best[3])
            evaluation["y0"].append(rec.y0)

    if skipped:
        message = f"{skipped} visit(s) at baseline time skipped in velocity computation"
        logger.warning(message)
        warnings.warn(message, SkippedVisitWarning, stacklevel=2)

    def arr(values, dtype=float):
        return np.asarray(values, dtype=dtype)

    return VelocityTable(
        subject_id=arr(train["id"], object), covariate_row=arr(train["row"], int),
        velocity=arr(train["v"]), time=arr(train["t"]), elapsed=arr(train["dt"]),
        baseline=arr(train["y0"]),
        eval_subject_id=arr(evaluation["id"], object), eval_covariate_row=arr(evaluation["row"], int),
        eval_time=arr(evaluation["t"]), eval_elapsed=arr(evaluation["dt"]),
        eval_outcome=arr(evaluation["y"]), eval_baseline=arr(evaluation["y0"]),
        skipped_visits=skipped,
    )


@dataclass(frozen=True)
class LongitudinalSchema:
    id: str
    time: str
    outcome: str
    covariates: Tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "LongitudinalSchema":
        return cls(id=mapping["id"], time=mapping["time"], outcome=mapping["outcome"],
                   covariates=tuple(mapping.get("covariates") or ()))


def load_longitudinal(csv_path: PathLike,
                      schema: LongitudinalSchema) -> Tuple[CovariateTable, List[LongitudinalRecord]]:
    """
    Loads a long-format visit table (one row per subject visit). The earliest
    visit of each subject is its baseline; covariates are read from that row.
    Visits with a missing outcome are dropped; a missing baseline outcome is an error.
    """
    logger.info("Attempting to load longitudinal training pool from: %s", csv_path)
    frame = _read_raw_csv(csv_path)
    ids = _parse_ids(frame, schema.id)
    times, t_missing = _parse_numeric(frame, schema.time)
    if t_missing.any():
        raise DataValidationError("Visit time missing", rows=(np.flatnonzero(t_missing) + 1).tolist())
    outcome, y_missing = _parse_numeric(frame, schema.outcome)
    roles = (schema.id, schema.time, schema.outcome)
    covariate_names = list(schema.covariates) or [c for c in frame.columns if c not in roles]
    parsed = [_parse_numeric(frame, c) for c in covariate_names]

    order = pd.DataFrame({"id": ids, "t": times, "pos": np.arange(len(ids))})
    first_seen = order.groupby("id", sort=False)["pos"].min().sort_values()
    baseline_rows, records = [], []
    for idx, (subject, group) in enumerate(
            sorted(order.groupby("id", sort=False), key=lambda g: first_seen[g[0]])):
        group = group.sort_values(["t", "pos"])
        base = int(group["pos"].iloc[0])
        if y_missing[base]:
            raise DataValidationError(f"Subject '{subject}' has a missing baseline outcome", rows=[base + 1])
        visits = [(times[p], outcome[p]) for p in group["pos"].iloc[1:] if not y_missing[p]]
        baseline_rows.append(base)
        records.append(LongitudinalRecord(subject_id=str(subject), t0=float(times[base]),
                                          y0=float(outcome[base]), visits=tuple(visits),
                                          covariate_row=idx))
    rows = np.asarray(baseline_rows, dtype=int)
    covariates = CovariateTable(tuple(covariate_names),
                                np.column_stack([p[0][rows] for p in parsed]),
                                np.column_stack([p[1][rows] for p in parsed]))
    covariates.check_observed()
    logger.info("-> Loaded %d subjects with %d post-baseline visits.",
                len(records), sum(len(r.visits) for r in records))
    return covariates, records
# file: data_model.py
