class LinGridError(Exception):
    exit_code = 1


class ConfigError(LinGridError, ValueError):
    """Bad shapes, bad configuration values, incompatible checkpoints."""

    exit_code = 2


class NumericError(LinGridError, ArithmeticError):
    """NaN/Inf in a loss or a gradient."""

    exit_code = 3


class VerificationError(LinGridError):
    """A gradient check or a contract check failed."""

    exit_code = 4
