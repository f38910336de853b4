"""Exception types raised across the library."""


class GNNError(Exception):
    """Base class for all library errors."""


class DimensionError(GNNError, ValueError):
    """Shapes or extents do not agree."""


class ContractError(GNNError, ValueError):
    """A precondition of an operation was violated."""


class GraphIndexError(GNNError, IndexError):
    """An index points outside its valid range."""


class DomainError(GNNError, ValueError):
    """Operation undefined for the given input (e.g. max of an empty tensor)."""


class PrecisionError(GNNError, TypeError):
    """Tensors of different floating point precision were mixed."""


class ResourceError(GNNError, MemoryError):
    """Requested materialization exceeds a configured cap."""


class NumericalError(GNNError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ParseError(GNNError, ValueError):
    """Malformed file content."""


class ValidationError(GNNError, ValueError):
    """File content parsed but violates a data invariant."""
