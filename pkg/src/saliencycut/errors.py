"""Exception types shared across the package."""


class SaliencyCutError(Exception):
    """Base class for all package errors."""


class DimensionError(SaliencyCutError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SaliencyCutError, ValueError):
    """A caller violated an operation precondition."""


class ConfigError(SaliencyCutError, ValueError):
    """A configuration value is out of its allowed range."""


class DataError(SaliencyCutError, ValueError):
    """A dataset is missing samples required by the requested operation."""


class MetricError(SaliencyCutError, ValueError):
    """A metric was asked to evaluate degenerate inputs."""


class GraphError(SaliencyCutError, ValueError):
    """Misuse of the differentiation tape (wrong graph, non-scalar loss)."""


class NumericsError(SaliencyCutError, ArithmeticError):
    """NaN or Inf detected at an op boundary."""


class CheckpointError(SaliencyCutError, ValueError):
    """A model checkpoint file is malformed or has the wrong version."""


class TrainingDiverged(SaliencyCutError, ArithmeticError):
    """The training loss became non-finite."""
