"""Exception hierarchy shared by every module.

The CLI maps ``SparseLLMError`` subclasses to exit status 1 and prints a
single ``error: kind=<ClassName> ...`` line, so messages here should stay on
one line.
"""


class SparseLLMError(Exception):
    """Base class for domain errors."""


class ShapeError(SparseLLMError, ValueError):
    pass


class DegenerateError(SparseLLMError, ValueError):
    """Raised when a statistic is undefined for the given data (e.g. zero variance)."""


class CorruptionError(SparseLLMError, ValueError):
    """Encoded sparse data is inconsistent (popcount mismatch, truncated stream, bad magic)."""


class SingularHessianError(SparseLLMError, ArithmeticError):
    pass


class ScheduleError(SparseLLMError, ValueError):
    pass


class TrainingError(SparseLLMError, RuntimeError):
    pass


class ModeError(SparseLLMError, ValueError):
    """Fine-tuning mode and supplied checkpoints do not fit together."""


class MixtureError(SparseLLMError, ValueError):
    pass


class ContextError(SparseLLMError, ValueError):
    """Prompt or KV cache would exceed the model's maximum context."""


class RecipeError(SparseLLMError, ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


class CheckpointError(SparseLLMError, ValueError):
    pass
