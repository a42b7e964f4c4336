"""Exception types shared across the package."""


class DctsimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DctsimError):
    """Tensor shapes disagree with what an operation requires."""


class NumericOverflowError(DctsimError):
    """A NaN or Inf appeared where only finite values are allowed."""


class MaskLifecycleError(DctsimError):
    """A forward mask was reused, dropped, or consumed out of order."""


class StateMismatchError(DctsimError):
    """Backward was called with a forward state it does not match."""


class WireFormatError(DctsimError):
    """Base class for malformed wire frames."""

    code = "wire-format"


class TruncatedFrameError(WireFormatError):
    code = "truncated-frame"


class BadMagicError(WireFormatError):
    code = "bad-magic"


class BadVersionError(WireFormatError):
    code = "bad-version"


class PopcountMismatchError(WireFormatError):
    code = "popcount-mismatch"


class IndexRangeError(WireFormatError):
    code = "index-range"


class LinkClosedError(DctsimError):
    """Send or receive on a closed link."""


class PartitionError(DctsimError):
    """Node partitions do not tile the layer graph correctly."""


class StalenessError(DctsimError):
    """An async stream exceeded the configured staleness bound."""


class ConfigError(DctsimError):
    """Invalid or unparseable experiment configuration."""
