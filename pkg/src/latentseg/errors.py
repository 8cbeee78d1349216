"""Exception hierarchy shared by every module of the package.

The CLI maps each class to a stable category name, so callers can rely on
``type(err).__name__`` in error lines.
"""


class LatentSegError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentSegError, ValueError):
    pass


class NumericError(LatentSegError, ArithmeticError):
    """Non-finite values or a diverged optimisation."""


class ConfigError(LatentSegError, ValueError):
    pass


class GradientStateError(LatentSegError, RuntimeError):
    """Backward called in an invalid state (twice, non-scalar, missing grads)."""


class ValidationError(LatentSegError, ValueError):
    pass


class CorruptionError(LatentSegError, ValueError):
    """Bitstream or symbol data does not decode consistently."""


class ContainerError(LatentSegError, ValueError):
    """Base for .lcr parsing failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class InconsistentError(ContainerError):
    pass


class IncompatibleError(LatentSegError, ValueError):
    """Codec configuration does not match a container header."""


class ImageFormatError(LatentSegError, ValueError):
    pass
