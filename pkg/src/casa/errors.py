"""Exception types raised across the package."""


class CasaError(Exception):
    """Base class for all package errors."""


class FormatError(CasaError):
    """Checkpoint bytes do not follow the expected layout."""


class DataError(CasaError):
    """A tensor holds values the pipeline cannot accept (NaN/Inf)."""


class IoError(CasaError, OSError):
    """A file could not be read or written."""


class PairingError(CasaError):
    """LoRA factors could not be paired into a consistent adapter."""


class ShapeError(CasaError, ValueError):
    """Two matrices that must agree in shape do not."""


class NumericalError(CasaError):
    """A numerical routine (SVD) failed to converge."""


class DegenerateError(CasaError, ValueError):
    """Input is degenerate for the requested statistic (zero norm, empty set)."""
