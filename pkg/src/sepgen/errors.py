"""Exception types shared across the package."""


class SepgenError(Exception):
    """Base class for all package errors."""


class DecodeError(SepgenError):
    """Audio file could not be read or decoded."""


class EmptyAudioError(DecodeError):
    """Decoded audio contained no samples."""


class ShapeError(SepgenError):
    """Array dimensions violate an operation's contract."""


class ConfigError(SepgenError):
    """Invalid configuration value or combination."""


class NormalizationError(SepgenError):
    """A vector that must be normalized has zero norm."""


class DegenerateSignalError(SepgenError):
    """A reference signal is identically zero."""


class DataError(SepgenError):
    """Manifest or dataset contents are unusable."""


class PairingError(DataError):
    """Generated and reference sets cannot be aligned item by item."""
