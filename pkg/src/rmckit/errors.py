"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Input contains NaN or is otherwise numerically unusable."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class GenerationError(ValueError):
    """Dataset spec cannot be satisfied (e.g. infeasible length/vocab combination)."""


class ParseError(ValueError):
    """Malformed persisted record; message carries the line number."""


class DependencyError(FileNotFoundError):
    """A required input artifact is missing; message names the file."""


class MetricUndefinedError(ValueError):
    """A derived metric has no defined value (e.g. zero teacher accuracy gap)."""
