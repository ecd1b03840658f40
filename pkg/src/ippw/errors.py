"""Exception hierarchy.

Errors are split by how a caller should react: ``DataError`` means the input
file or table is malformed (CLI exit code 2), while the ``NumericalError``
family means the computation cannot proceed on otherwise well-formed input
(CLI exit code 3).
"""


class IppwError(Exception):
    """Base class for all package errors."""


class DataError(IppwError):
    """Malformed input: missing columns, bad values, broken schema."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DesignError(IppwError):
    """Matched design violates the requirements of the requested operation."""


class NumericalError(IppwError):
    """Numerical failure: rank deficiency, leverage blow-up, and similar."""


class RankError(NumericalError):
    """Design matrix is rank deficient."""


class LeverageError(NumericalError):
    """A hat-matrix leverage is too close to one."""


class ConvergenceError(NumericalError):
    """Iterative fit did not converge; carries the last deviance seen."""

    def __init__(self, message, deviance=None):
        super().__init__(message)
        self.deviance = deviance


class WeakInstrumentError(NumericalError):
    """Estimating-equation denominator is zero (irrelevant instrument)."""


class InfeasibleMatchError(NumericalError):
    """No valid full matching exists for the given units."""
