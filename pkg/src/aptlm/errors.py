"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class DegenerateRowError(ContractViolation):
    """A masked softmax row had every entry masked."""


class DeterminismError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    """A required upstream artifact (checkpoint, dataset) is missing."""


class UnsupportedAnnotation(ValueError):
    pass


class EmptyConditioningError(ContractViolation):
    pass


class SequenceLengthError(ContractViolation):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class CheckpointError(ValueError):
    pass
