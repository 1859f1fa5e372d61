"""Exception hierarchy shared by every module, mapped to CLI exit codes."""


class CorediffError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CorediffError):
    """Invalid configuration or argument outside its documented range (exit code 2)."""


class DataError(CorediffError):
    """Invalid, inconsistent, or unusable data (exit code 3)."""


class InsufficientData(DataError):
    """Fewer samples than the operation requires."""


class ShapeError(DataError):
    """Dimension or length mismatch between inputs."""


class SingularCovariance(DataError):
    """Covariance is not positive definite, even after regularization."""


class FormatError(DataError):
    """Malformed, truncated, or inconsistent artifact file."""


class VersionError(FormatError):
    """Artifact written by an incompatible format version (exit code 4)."""
