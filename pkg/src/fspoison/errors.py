"""Exception taxonomy shared across the package."""


class FspoisonError(Exception):
    """Base class for all package errors."""


class ConfigError(FspoisonError):
    """Invalid or inconsistent run configuration."""


class DataError(FspoisonError):
    """Dataset, task, or file-content problem."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """File ends before its declared contents."""


class DimensionMismatchError(DataError):
    """Declared dimensions are inconsistent with the file contents."""


class NumericError(FspoisonError):
    """Non-finite values encountered during training or attack generation."""
