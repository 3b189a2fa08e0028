"""Exception hierarchy shared by the library and the CLI.

Exit codes: 0 success, 2 configuration error, 3 stage contract violation,
4 numeric failure.
"""


class HelixctError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HelixctError):
    """Invalid or inconsistent configuration / file schema."""

    exit_code = 2


class StageContractError(HelixctError):
    """A pipeline stage received inputs violating its contract."""

    exit_code = 3


class NumericError(HelixctError):
    """Non-finite values or diverging optimization."""

    exit_code = 4
