"""Exception types shared across the simulator."""

from __future__ import annotations


class MortgageSimError(Exception):
    """Base class for simulator errors."""


class ValidationError(MortgageSimError, ValueError):
    """A value or file failed validation. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(MortgageSimError):
    """An operation was called outside its precondition."""


class LedgerError(ContractError):
    """A cover ledger operation would break conservation."""


class IntegrityError(MortgageSimError):
    """Trace data failed a conservation check."""


class GridError(ContractError):
    """A shock grid is missing points required for integration."""


class TrainingError(MortgageSimError):
    """Policy optimisation produced non-finite values."""


def add_context(exc: BaseException, context: str) -> BaseException:
    """Prefix ``exc``'s message with ``context`` in place and return it for re-raising."""
    exc.args = (f"{context}: {exc}",) + tuple(exc.args[1:])
    return exc
