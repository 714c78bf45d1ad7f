"""Exception hierarchy shared across the package."""


class MDMTError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MDMTError, ValueError):
    """Tensor or array shapes are incompatible."""


class ConfigError(MDMTError, ValueError):
    """Invalid configuration, or a dataset that does not match it."""


class NumericError(MDMTError, ArithmeticError):
    """A NaN/Inf appeared, or a quantity needed to be nonzero and was not."""


class DomainError(MDMTError, ValueError):
    """A value lies outside the domain an operation accepts."""


class UsageError(MDMTError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


class FormatError(MDMTError, ValueError):
    """A file on disk is malformed, truncated or has the wrong version."""


class GenerationError(MDMTError, RuntimeError):
    """Synthetic data could not be generated from the given spec."""


class EvaluationError(MDMTError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
