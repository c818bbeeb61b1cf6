"""Exception hierarchy shared by every module."""


class LcaNetError(Exception):
    """Base class for all library errors."""


class ShapeError(LcaNetError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class DataError(LcaNetError):
    """Input data (WAV files, dataset layout, checkpoints) is unusable."""


class NumericError(LcaNetError, ArithmeticError):
    """A computation produced non-finite values."""


class TapeError(LcaNetError, RuntimeError):
    """A gradient tape was misused (e.g. replayed twice)."""


class CheckpointError(DataError):
    """A checkpoint file is malformed, truncated or incompatible."""
