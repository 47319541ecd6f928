"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data
problems (bad files, mismatched ids) exit 2, anything else exit 3.
"""


class DermaugError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(DermaugError):
    """Malformed or unsupported image bytes. Message names the byte offset."""


class LabelCsvError(DermaugError):
    """Bad ground-truth/prediction CSV. Message names the 1-based line."""


class ConfigError(DermaugError):
    """Invalid run configuration or CLI usage. Message names the key path."""


class ShapeError(DermaugError):
    """Array/parameter shape mismatch. Message names the layer or field."""


class DataError(DermaugError):
    """Dataset-level problem: missing files, duplicate ids, degenerate splits."""


class NumericError(DermaugError):
    """Non-finite values where finite ones are required."""


class StaleCacheError(DermaugError):
    """A backward pass was handed a cache from an outdated forward pass."""
