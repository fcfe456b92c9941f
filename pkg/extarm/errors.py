# -*- coding: utf-8 -*-
# file: errors.py
# ExtArm v1.0.0 - ATT estimation for single-arm trials with external control arms.
# Licensed under GPLv3.
# Exception and warning classes shared by every module.

from typing import Optional, Sequence

import numpy as np


class ExtArmError(Exception):
    """ Base class for every error raised by ExtArm. """
    pass


class ConfigError(ExtArmError):
    """ Invalid run configuration. `pointers` lists the JSON pointers at fault. """

    def __init__(self, message: str, pointers: Sequence[str] = ()):
        self.pointers = list(pointers)
        if self.pointers:
            message = f"{message}: {', '.join(self.pointers)}"
        super().__init__(message)


class DataFormatError(ExtArmError):
    """ Malformed input file (parse error, non-numeric cell, missing column). """

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DataValidationError(ExtArmError):
    """ Well-formed input that violates a domain rule. `rows` are 1-based data rows. """

    def __init__(self, message: str, rows: Sequence[int] = ()):
        self.rows = list(rows)
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:10])
            more = "" if len(self.rows) <= 10 else f" (+{len(self.rows) - 10} more)"
            message = f"{message}: row {shown}{more}"
        super().__init__(message)


class DegenerateCohortError(ExtArmError):
    """ Fewer than two treated or two control subjects left. """
    pass


class NoOverlapError(ExtArmError):
    """ Treated and control propensity ranges do not overlap. """
    pass


class PositivityError(ExtArmError):
    """ Treated mass where the control distribution has none. """
    pass


class ConvergenceError(ExtArmError):
    """ Iterative solver produced a non-finite objective. """

    def __init__(self, message: str, last_iterate: Optional[np.ndarray] = None, iterations: int = 0):
        self.last_iterate = last_iterate
        self.iterations = iterations
        super().__init__(message)


class EstimationError(ExtArmError):
    """ An estimator could not produce a value from its inputs. """
    pass


class MissingComponentError(ExtArmError):
    """ A variance formula needs a component that was not supplied. """

    def __init__(self, method: str, component: str):
        self.method = method
        self.component = component
        super().__init__(f"{method} variance needs component '{component}'")


class BootstrapFailureError(ExtArmError):
    """ Too many bootstrap replicates failed. """
    pass


class MonteCarloFailureError(ExtArmError):
    """ Too many Monte Carlo repetitions failed. """
    pass


class DgpError(ExtArmError):
    """ Invalid data-generating process specification. """
    pass


class ExtArmWarning(UserWarning):
    pass


class ConstantColumnWarning(ExtArmWarning):
    pass


class SeparationWarning(ExtArmWarning):
    pass


class ZeroVarianceWarning(ExtArmWarning):
    pass


class OptimisticVarianceWarning(ExtArmWarning):
    pass


class SkippedVisitWarning(ExtArmWarning):
    pass
# file: errors.py
