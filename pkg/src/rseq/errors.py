"""Exception hierarchy shared across the package."""


class RSeqError(Exception):
    pass


class UsageError(RSeqError):
    pass


class DimensionError(RSeqError, ValueError):
    pass


class ConfigError(RSeqError, ValueError):
    pass


class DataError(RSeqError, ValueError):
    pass


class IngestionError(DataError):
    pass


class NumericFault(RSeqError, ArithmeticError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op {op!r}")


class CheckpointError(RSeqError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
