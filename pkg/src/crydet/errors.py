"""Exception hierarchy shared across the package."""


class CryDetError(Exception):
    """Base class for all crydet errors."""


class DecodeError(CryDetError):
    """Malformed audio container."""


class UnsupportedFormatError(DecodeError):
    """Well-formed container holding a codec we do not decode."""


class ProfileMismatchError(CryDetError):
    """Audio frame does not match the mel profile it is fed into."""


class ManifestError(CryDetError):
    """Invalid dataset manifest or bag metadata."""


class DimensionError(CryDetError, ValueError):
    """Tensor shapes are inconsistent with the operation."""


class ContractError(CryDetError, ValueError):
    """A documented precondition was violated."""


class FormatError(CryDetError):
    """Corrupted or incompatible binary file (weights or features)."""


class TrainingError(CryDetError):
    """Training aborted, e.g. on a non-finite loss."""
