"""Exception hierarchy shared by every denseplan module."""


class DenseplanError(Exception):
    """Base class for all errors raised by denseplan."""


class ShapeError(DenseplanError, ValueError):
    pass


class BoundsError(DenseplanError, IndexError):
    pass


class SizeOverflowError(DenseplanError, OverflowError):
    pass


class AccountingUnderflowError(DenseplanError, RuntimeError):
    """A free was recorded for more bytes than are live in an arena."""


class CapacityError(DenseplanError, RuntimeError):
    """A destination buffer or pooled region is too small for the request."""


class ConfigError(DenseplanError, ValueError):
    pass


class ProtocolError(DenseplanError, RuntimeError):
    """Operations were invoked in an order the execution protocol forbids."""


class DegenerateBatchError(DenseplanError, ValueError):
    pass


class LabelError(DenseplanError, ValueError):
    pass


class RangeError(DenseplanError, ValueError):
    pass


class FormatError(DenseplanError, ValueError):
    """Malformed input data (e.g. a truncated CIFAR-10 batch file)."""


class CorruptCheckpointError(FormatError):
    pass


class VerificationError(DenseplanError, AssertionError):
    """A numeric or accounting self-check failed."""
