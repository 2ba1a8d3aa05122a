"""Typed errors shared across the package."""


class EnvlearnError(Exception):
    """Base class for all package errors."""


class EmptySubset(EnvlearnError):
    """A subset operation selected zero rows."""


class EmptyEnvironment(EnvlearnError):
    """An operation that needs a non-empty environment received an empty one."""


class MinorityEmpty(EnvlearnError):
    """A partition has an empty side where both environments were required."""


class MissingMetadata(EnvlearnError):
    """A diagnostic needs per-sample metadata that the dataset does not carry."""


class DimensionMismatch(EnvlearnError):
    """Shapes of model, features, labels or weights do not agree."""


class NonFiniteLoss(EnvlearnError):
    """Training loss became NaN or infinite."""


class TooLarge(EnvlearnError):
    """Exhaustive enumeration was requested on too many samples."""


class BadMagic(EnvlearnError):
    """IDX header magic does not encode a supported dtype/rank."""


class Truncated(EnvlearnError):
    """Byte buffer ends before its declared payload."""


class BadStride(EnvlearnError):
    """CIFAR-10 buffer length is not a multiple of the record stride."""


class BadLabel(EnvlearnError):
    """CIFAR-10 record carries a label outside 0..9."""


class ConfigError(EnvlearnError):
    """Experiment configuration failed validation."""
