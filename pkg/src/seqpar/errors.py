"""Exception types shared across the package.

Everything numeric raises eagerly: a shape mismatch, a non-finite value or a
bad partition is a bug in the caller and should never be papered over.
"""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class PartitionError(ValueError):
    """A dimension is not evenly divisible by the worker count."""


class DegenerateRowError(ValueError):
    """A softmax row has every entry masked out."""


class NumericsError(ArithmeticError):
    """A kernel produced NaN or Inf."""


class CommTimeout(RuntimeError):
    """A collective did not complete before the communicator timeout."""


class CommAborted(RuntimeError):
    """The communicator was torn down while a worker was blocked in it."""
