"""Exception types shared across the package.

Each carries an ``exit_code`` used by the command-line front end.
"""


class PSTPError(Exception):
    exit_code = 1


class ConfigError(PSTPError, ValueError):
    exit_code = 2


class ShapeError(PSTPError, ValueError):
    """Operand dimensions do not line up."""

    exit_code = 2


class TapeError(PSTPError, RuntimeError):
    pass


class DataError(PSTPError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Base for malformed container files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class EmptySplitError(DataError):
    pass


class NumericalAbort(PSTPError, FloatingPointError):
    exit_code = 4
