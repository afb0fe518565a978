"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GridScreenError(Exception):
    """Base class for all errors raised by this package."""


class CaseError(GridScreenError):
    """Malformed or inconsistent case data.

    Parameters
    ----------
    message : str
        Description of the problem.
    line : int, optional
        1-based line number in the source file, when the error can be
        pinned to one.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PowerFlowError(GridScreenError):
    """Numerical failure while solving or linearizing a power flow."""


class DivergenceError(PowerFlowError):
    """Newton iteration diverged (mismatch grew repeatedly)."""


class SingularSystemError(PowerFlowError):
    """A system matrix could not be factorized."""


class IslandingError(GridScreenError):
    """An outage or operation would electrically disconnect part of the network."""
