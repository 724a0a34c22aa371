"""Exception types shared across the package."""


class BridgecalError(Exception):
    """Base class for all package errors."""


class DataError(BridgecalError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A file does not match its declared text or binary format."""


class DimensionError(DataError):
    """Array or matrix shapes disagree with the contract."""


class ConfigError(BridgecalError):
    """Invalid configuration key, value, or combination."""


class NumericError(BridgecalError):
    """Numeric failure such as non-finite values or a failed decomposition."""
