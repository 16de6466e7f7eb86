"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SubExpertsError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SubExpertsError, ValueError):
    pass


class InputError(SubExpertsError, ValueError):
    pass


class DegenerateInputError(SubExpertsError, ValueError):
    pass


class EvaluationError(SubExpertsError, ArithmeticError):
    pass


class ConfigError(SubExpertsError, ValueError):
    """Invalid configuration. ``path`` names the offending ``section.key`` when known."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ContractError(SubExpertsError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class TrainingError(SubExpertsError, RuntimeError):
    def __init__(self, message: str, batch_index: int | None = None):
        self.batch_index = batch_index
        super().__init__(message if batch_index is None else f"batch {batch_index}: {message}")


class ParseError(SubExpertsError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class CheckpointError(SubExpertsError, IOError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass
