"""Exception hierarchy shared by every loss_convexification module."""


class ConvexificationError(Exception):
    """Base class for all errors raised by this package"""


class PreconditionError(ConvexificationError, ValueError):
    """An operation was called with arguments outside its contract"""


class ShapeMismatchError(ConvexificationError, ValueError):
    """A primitive received operands whose shapes do not agree"""


class NonFiniteError(ConvexificationError, ArithmeticError):
    """A NaN or infinite value appeared where a finite one is required"""


class TapeConsumedError(ConvexificationError, RuntimeError):
    """Backward was requested on a tape that was already consumed"""


class LayoutError(ConvexificationError, ValueError):
    """A prediction vector does not fit the layout it is used with"""


class ConfigError(ConvexificationError, ValueError):
    """A configuration value, file or name is invalid"""


class DegenerateGeometryError(ConvexificationError, ValueError):
    """A point set is too degenerate for a rigid fit"""


class UndefinedBoundError(ConvexificationError, ValueError):
    """A near-optimality bound was requested where it is undefined"""


class CheckpointError(ConvexificationError):
    """Base class for checkpoint persistence errors"""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version"""


class CorruptCheckpointError(CheckpointError):
    """The checkpoint file is truncated or fails its checksum"""


class NumericAbortError(NonFiniteError):
    """Training stopped on a non-finite loss.

    The last good checkpoint is available as ``checkpoint``.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
