"""Exception hierarchy shared by all subpackages.

Each class carries the CLI exit code it maps to, so the command-line layer
can translate failures without a lookup table of its own.
"""


class RopimError(Exception):
    exit_code = 1


class ShapeError(RopimError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class DomainError(RopimError, ValueError):
    """A scalar argument lies outside its admissible range."""

    exit_code = 2


class ContractError(RopimError, RuntimeError):
    """An API was used outside its documented preconditions."""

    exit_code = 1


class FormatError(RopimError):
    """A file on disk does not follow the expected binary or text layout."""

    exit_code = 4


class ConfigMismatchError(RopimError):
    """A checkpoint and the data or flags it is used with disagree."""

    exit_code = 4


class TrainingError(RopimError, ArithmeticError):
    """Non-finite values appeared during optimization."""

    exit_code = 5
