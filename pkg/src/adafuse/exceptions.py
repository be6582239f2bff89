"""Exception hierarchy shared across the package."""


class AdaFuseError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AdaFuseError, ValueError):
    pass


class NonFiniteError(AdaFuseError, FloatingPointError):
    pass


class DegenerateVectorError(AdaFuseError, ValueError):
    """A vector's norm is too small to define a direction."""


class DegenerateFusionError(DegenerateVectorError):
    """The pre-normalisation fused query collapsed to (near) zero."""

    def __init__(self, message, sample_id=None, round_index=None):
        super().__init__(message)
        self.sample_id = sample_id
        self.round_index = round_index


class ConfigError(AdaFuseError, ValueError):
    pass


class ContractViolation(AdaFuseError, RuntimeError):
    pass


class DataFormatError(AdaFuseError, ValueError):
    pass


class IndexBuildError(AdaFuseError, ValueError):
    pass


class UnknownIdError(AdaFuseError, KeyError):
    pass


class DegenerateRegressionError(AdaFuseError, ValueError):
    pass


class CheckpointError(AdaFuseError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
