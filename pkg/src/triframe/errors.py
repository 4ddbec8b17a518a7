"""Exception types; the CLI maps each family to an exit code."""


class TriframeError(Exception):
    exit_code = 1


class ValidationError(TriframeError, ValueError):
    """Bad shapes, geometry, headers or arguments."""

    exit_code = 1


class FormatError(ValidationError):
    """A file on disk is malformed (truncated, bad magic, bad header)."""


class NumericalError(TriframeError, ArithmeticError):
    """Non-finite values reached the optimizer or the loss."""

    exit_code = 3
