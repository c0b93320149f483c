"""Exception taxonomy shared across the package.

Every error raised on a contract violation derives from U4DError so the
CLI can map any failure to a single machine-parseable line.
"""


class U4DError(Exception):
    """Base class; `code` feeds the CLI's one-line error format."""

    code = "error"


class FileFormatError(U4DError):
    """Bad magic, bad version, truncated payload, or misaligned record."""

    code = "format"


class DataError(U4DError):
    """Non-finite values or otherwise corrupt in-memory data."""

    code = "data"


class ShapeError(U4DError):
    """Array shape violates an operation's contract."""

    code = "shape"


class ConfigError(U4DError):
    """Out-of-range or missing configuration value."""

    code = "config"


class DegeneracyError(U4DError):
    """Geometry too degenerate to solve (e.g. collinear ICP input)."""

    code = "degenerate"


class InsufficientDataError(U4DError):
    """Not enough samples/frames for the requested estimator."""

    code = "insufficient"


class TrainingDivergedError(U4DError):
    """Non-finite training loss; message carries step and batch ids."""

    code = "diverged"


class UsageError(U4DError):
    """Bad CLI invocation."""

    code = "usage"
