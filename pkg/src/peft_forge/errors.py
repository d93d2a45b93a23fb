from .numerics import DimensionError, NonFiniteError


class ConfigError(ValueError):
    pass


class TaskError(KeyError):
    pass


class SequenceError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


__all__ = [
    "ConfigError",
    "DimensionError",
    "NonFiniteError",
    "SequenceError",
    "TaskError",
    "TrainingDiverged",
]
