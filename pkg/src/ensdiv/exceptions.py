"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``category`` which the CLI
prints and maps to its exit code.
"""


class EnsDivError(Exception):
    category = "error"


class ShapeError(EnsDivError, ValueError):
    category = "shape-mismatch"


class DomainError(EnsDivError, ValueError):
    """Operation evaluated outside the domain where it is defined."""

    category = "domain"


class GraphError(EnsDivError, RuntimeError):
    category = "graph"


class NestingError(GraphError):
    category = "nesting"


class ConfigError(EnsDivError, ValueError):
    category = "config"


class UndefinedMetricError(EnsDivError, ValueError):
    category = "undefined-metric"


class CheckpointError(EnsDivError, ValueError):
    category = "checkpoint"


class VersionMismatchError(CheckpointError):
    category = "version-mismatch"


class FormatError(EnsDivError, ValueError):
    """Malformed external file (IDX, CSV, world description)."""

    category = "format"


class NonFiniteError(EnsDivError, FloatingPointError):
    category = "non-finite"


class DivergenceError(NonFiniteError):
    category = "divergence"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
