"""
Exception hierarchy shared by the TML library and the command-line tool
"""


class TMLError(Exception):
    """Base exception for all library errors"""
    pass


class ShapeError(TMLError):
    """Raised when tensor extents are inconsistent with an operation"""
    pass


class SizeError(TMLError):
    """Raised when a requested tensor would overflow the index type"""
    pass


class DomainError(TMLError):
    """Raised when an operation is undefined for its input (empty mean, non-finite result)"""
    pass


class ContractError(TMLError):
    """Raised when a caller breaks an API contract (backward twice, unfrozen TM, missing grad)"""
    pass


class ConfigError(TMLError):
    """Raised for invalid configuration values, unknown keys or empty datasets"""
    pass


class ImageIOError(TMLError):
    """Raised when an image cannot be read or written"""
    pass


class CheckpointError(TMLError):
    """Base exception for checkpoint load failures"""
    pass


class CheckpointFormatError(CheckpointError):
    """File does not start with the checkpoint magic or has a malformed record"""
    pass


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""
    pass


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the payload"""
    pass


class CheckpointTruncatedError(CheckpointError):
    """File is shorter than its header declares"""
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint config differs from the config the caller expects"""
    pass
