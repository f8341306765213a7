"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, everything else exits 4.
"""


class SamastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SamastError):
    """Invalid or inconsistent configuration."""


class DataError(SamastError):
    """Unreadable or inconsistent input data."""


class DecodeError(DataError):
    """A WAV container could not be decoded."""


class ParseError(DataError):
    """A text record (annotation, split list, manifest) is malformed."""


class RangeError(DataError):
    """A value lies outside its permitted range."""


class IngestionError(DataError):
    """A dataset could not be assembled (missing recordings, classes...)."""


class DimensionError(SamastError, ValueError):
    """Operand shapes are incompatible."""


class LabelError(SamastError, ValueError):
    """A class label lies outside ``[0, num_classes)``."""


class ContractError(SamastError, ValueError):
    """A call violated a documented precondition."""


class DegenerateGradientError(SamastError):
    """The gradient is identically zero, so its direction is undefined."""


class CalibrationError(SamastError):
    """Perplexity binary search failed to converge."""


class CheckpointError(SamastError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError, ConfigError):
    pass
