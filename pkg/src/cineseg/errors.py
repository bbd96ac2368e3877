"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right type
matters more than the message text.
"""


class CinesegError(Exception):
    """Base class for all package errors."""


class ConfigError(CinesegError):
    """Invalid configuration value or malformed config file."""


class DataError(CinesegError):
    """Missing file, bad file format, or schema-version mismatch."""


class DimensionMismatchError(CinesegError):
    """Operands defined on incompatible grids."""


class DegenerateInputError(CinesegError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class TopologyError(CinesegError):
    """A mask does not have the topology an operation requires."""


class DivergenceError(CinesegError):
    """An iterative solver produced a non-finite objective."""
