"""Exception taxonomy shared by every cmpq module.

CLI exit-code mapping: CmpqUsageError -> 2, every other CmpqError -> 1.
"""


class CmpqError(Exception):
    """Base class for all toolkit errors."""


class CmpqUsageError(CmpqError):
    """Bad invocation (flags, incompatible options); maps to exit code 2."""


class FormatError(CmpqError):
    """File does not parse as the expected container format."""


class VersionError(FormatError):
    """Container version is newer than this reader supports."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class CorruptTensor(CmpqError):
    """Tensor byte length or shape disagrees with its header entry."""


class UnsupportedDType(CmpqError):
    """Tensor element type outside the caller's allow-list."""


class IoError(CmpqError):
    """Underlying OS-level read/write failure."""


class ShapeError(CmpqError):
    """Array rank or dimensions incompatible with the operation."""


class NumericError(CmpqError):
    """NaN or infinity where finite values are required."""


class DomainError(CmpqError):
    """Scalar argument outside its documented range."""


class EmptyInputError(CmpqError):
    """Operation requires at least one element/channel but none remain."""


class ConfigError(CmpqError):
    """Inconsistent or incomplete configuration / input combination."""


class OracleCapError(CmpqError):
    """Input exceeds the exact-clustering oracle size limits."""


class CorruptData(CmpqError):
    """Decoded artifact violates its own invariants (e.g. index out of range)."""


class InternalError(CmpqError):
    """Contract between internal stages was violated; indicates a bug."""
