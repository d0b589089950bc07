"""Exception types shared across the toolkit.

The CLI maps :class:`ValidationError` to exit code 2 (bad input or usage)
and :class:`NumericError` plus any other unexpected exception to exit
code 1 (runtime failure).
"""


class ValidationError(ValueError):
    """Input data, flags, or preconditions are invalid."""


class NumericError(RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""
