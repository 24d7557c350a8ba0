"""Exception taxonomy shared across the package.

CLI exit-code mapping lives in cli.py: usage/config errors exit 1,
data/parse errors exit 2, numeric/contract/geometry failures exit 3.
"""


class PartViewError(Exception):
    """Base class for all package errors."""


class DimensionError(PartViewError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(PartViewError):
    """Non-finite or otherwise numerically invalid input."""


class ContractError(PartViewError):
    """A documented precondition was violated by the caller."""


class ParseError(PartViewError):
    """Malformed input file; message carries the offending line number."""


class ConfigError(PartViewError):
    """Invalid configuration key, value, or combination."""


class GeometryError(PartViewError):
    """Degenerate geometry (zero-extent mesh, collapsed box, ...)."""


class DataError(PartViewError):
    """Missing or inconsistent data artifacts on disk or in memory."""


class DetectionError(PartViewError):
    """The detector could not produce the proposals a caller requires."""


class CheckpointError(PartViewError):
    """Unreadable checkpoint: bad magic, version mismatch, or truncation."""
