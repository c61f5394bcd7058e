"""Exception hierarchy shared by all crossreg modules."""


class CrossregError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CrossregError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class DimensionError(ShapeError):
    """A spatial extent is too small for the requested operation."""


class ConfigError(CrossregError, ValueError):
    pass


class ContractError(CrossregError, RuntimeError):
    """A documented precondition of an API call was violated."""


class UninitializedStatsError(CrossregError, RuntimeError):
    """Batch norm was run in eval mode before any running statistics existed."""


class EmptyStructureError(CrossregError, ValueError):
    pass


class FormatError(CrossregError, ValueError):
    """A file on disk does not match its declared layout."""


class GenerationError(CrossregError, RuntimeError):
    pass


class NumericalError(CrossregError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""
