"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so library code should raise
the most specific type that applies.
"""


class ConfigError(ValueError):
    """Bad or incomplete configuration (CLI exit code 2)."""


class TrainingFailure(RuntimeError):
    """Non-finite loss or other unrecoverable training state (CLI exit code 3)."""


class WavelengthRangeError(ValueError):
    """Wavelength query outside the valid range (CLI exit code 4)."""


class ShapeMismatchError(ValueError):
    """Array shape or wavelength-list mismatch between operands (CLI exit code 5)."""


class CubeFormatError(ValueError):
    """Malformed portable cube container on disk."""
