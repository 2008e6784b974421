"""Exception types shared across the package."""

from .numerics.tensor import ContractError, DimensionError, NumericError


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class FormatError(ValueError):
    """A file does not follow its binary or text format."""


class VersionError(FormatError):
    """A file's format version is not supported by this build."""


class CorruptionError(FormatError):
    """A file's payload disagrees with its header or checksum."""


class CompatibilityError(ValueError):
    """Two artifacts (checkpoint, config) cannot be combined."""


class StageTagError(CompatibilityError):
    """A checkpoint carries the wrong curriculum-stage tag."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or otherwise failed mid-run."""


__all__ = [
    "CompatibilityError",
    "ConfigError",
    "ContractError",
    "CorruptionError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "StageTagError",
    "TrainingError",
    "VersionError",
]
