"""Exception hierarchy shared by every xnn module."""


class XNNError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(XNNError, ValueError):
    pass


class ShapeError(XNNError, ValueError):
    pass


class NumericError(XNNError, ArithmeticError):
    pass


class TrainingDiverged(NumericError):
    """Raised when a loss turns non-finite. ``run`` holds the partial TrainRun."""

    def __init__(self, message, run=None):
        super().__init__(message)
        self.run = run


class KeyFileError(XNNError):
    """Base class for key-file parse failures."""


class BadMagicError(KeyFileError):
    pass


class VersionMismatchError(KeyFileError):
    pass


class ChecksumError(KeyFileError):
    pass


class TruncatedFileError(KeyFileError):
    pass


class KeyInvariantError(KeyFileError):
    """The file parsed but the key it encodes violates a key invariant."""


class DatasetFileError(XNNError):
    pass


class ConfigError(XNNError, ValueError):
    pass


class OracleError(XNNError):
    """The black-box feature oracle failed to answer a query."""


class MetricsError(XNNError):
    """A metrics document is malformed or internally inconsistent."""


class CheckpointError(XNNError):
    """A model checkpoint cannot be read or does not match its stored config."""
