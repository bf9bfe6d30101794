"""Exception types shared across the package."""


class OsseonError(Exception):
    """Base class for all package-specific errors."""


class FormatError(OsseonError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedDepthError(FormatError):
    """PGM file uses a bit depth other than 8-bit."""


class PayloadLengthError(FormatError):
    """Raw container payload is shorter or longer than its header implies."""


class ContractError(OsseonError):
    """An operation was called with arguments violating its contract."""


class ConfigError(OsseonError):
    """Invalid configuration value or unknown configuration key."""


class NumericError(OsseonError):
    """An iterative solver failed to reach its tolerance.

    Carries the final residual so callers can report how close it got.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class MetricUndefinedError(OsseonError):
    """A metric is undefined for the given inputs (for example an empty surface)."""


class ArchitectureMismatchError(OsseonError):
    """A model file holds a different architecture than the caller expects."""


class TrainingDivergedError(OsseonError):
    """Training aborted on a non-finite loss. Carries the failing iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
