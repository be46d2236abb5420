"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration and missing-input problems
exit with 2, broken internal contracts with 3.
"""


class NeurocellError(Exception):
    """Base class for all package errors."""


class DimensionError(NeurocellError, ValueError):
    """Array extents do not agree with what an operation requires."""


class ConfigError(NeurocellError, ValueError):
    """A user-facing parameter is outside its documented range."""


class ContractError(NeurocellError, RuntimeError):
    """An internal precondition was violated (programming error)."""


class FormatError(NeurocellError, ValueError):
    """A file on disk is corrupt or does not match the expected layout."""


class GenerationError(NeurocellError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""
