"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation problems exit 1,
file/parse problems exit 2, numerical aborts exit 3.
"""


class ValidationError(ValueError):
    """Bad argument, config value, or precondition violation."""


class ShapeError(ValidationError):
    """Incompatible tensor shapes. The message names both shapes."""


class DomainError(ValidationError):
    """Op input outside its mathematical domain (log/sqrt of non-positive)."""


class FileFormatError(OSError):
    """Malformed or truncated file. The message names the offending path."""


class NumericalAbort(RuntimeError):
    """Non-finite values where the pipeline cannot continue."""
