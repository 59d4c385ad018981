"""Exception types; the CLI maps them onto exit codes."""


class DipsepError(Exception):
    exit_code = 1


class ConfigError(DipsepError, ValueError):
    """Bad configuration or usage (exit code 2)."""

    exit_code = 2


class DataError(DipsepError, ValueError):
    """Missing, malformed or inconsistent data (exit code 3)."""

    exit_code = 3


class NumericError(DipsepError, ArithmeticError):
    """Non-finite values during training or evaluation (exit code 4)."""

    exit_code = 4
