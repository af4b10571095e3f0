"""Exception hierarchy shared across the package."""


class AKDError(Exception):
    """Base class for all package errors."""


class DimensionError(AKDError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AKDError):
    """A precondition of an operation was violated."""


class LifecycleError(AKDError):
    """A differentiation graph was reused after its backward pass."""


class NumericalError(AKDError, FloatingPointError):
    """A forward result contained NaN or Inf."""


class EmptyAttentionError(AKDError, ValueError):
    """Every position of a softmax row is masked."""


class FreezeViolationError(AKDError):
    """Something tried to write a gradient or update into a frozen tensor."""


class StopGradientError(AKDError):
    """A distillation gradient reached a teacher parameter."""


class AlignmentError(AKDError, ValueError):
    """Teacher and student tensors disagree in frame count."""


class ConfigError(AKDError, ValueError):
    """Invalid or incomplete configuration."""


class ParseError(AKDError, ValueError):
    """Malformed dataset or checkpoint file."""


class UndefinedRateError(AKDError, ValueError):
    """FAR or FRR requested for a set missing one of the classes."""
