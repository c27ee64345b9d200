"""Exception types shared across the package."""

from __future__ import annotations


class HierSFLError(Exception):
    """Base class for all package errors."""


class ContractViolation(HierSFLError):
    """A caller broke a shape or state precondition."""


class InputError(HierSFLError, ValueError):
    """An argument value is outside its valid domain."""


class NumericError(HierSFLError, ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(HierSFLError):
    """A data file does not match its expected binary layout."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ offset {offset}: {message}")


class CapacityError(HierSFLError):
    """A partition request needs more samples than a label provides."""


class ConfigError(HierSFLError):
    """One or more configuration problems; ``problems`` lists every one."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ProtocolError(HierSFLError):
    """Wraps a failure inside a training protocol with its position."""

    def __init__(self, round_index: int, client: int | None, phase: str, cause: BaseException):
        self.round_index = round_index
        self.client = client
        self.phase = phase
        self.cause = cause
        where = f"round {round_index}"
        if client is not None:
            where += f", client {client}"
        super().__init__(f"{where}, phase {phase}: {type(cause).__name__}: {cause}")
