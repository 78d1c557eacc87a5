"""Exception hierarchy shared by every simcat module."""


class SimCatError(Exception):
    """Base class for all library errors."""


class InvalidInputError(SimCatError, ValueError):
    """Arguments violate a documented precondition."""


class StateError(SimCatError, RuntimeError):
    """Object is not in the state the operation requires (e.g. encoder not frozen)."""


class TrainingDivergedError(SimCatError, RuntimeError):
    """A training loop produced a non-finite loss."""


class AttackError(SimCatError, RuntimeError):
    """An attack or poison-crafting loop failed.

    ``step`` is the iteration at which the failure was observed, when known.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class FormatError(SimCatError, ValueError):
    """A file does not carry the expected magic bytes or version."""


class CorruptionError(FormatError):
    """A file is truncated or internally inconsistent."""


class DegenerateDefenseError(SimCatError, RuntimeError):
    """A filtering defense removed every clean sample."""


class UndefinedCorrelationError(SimCatError, ValueError):
    """Correlation requested on data with zero variance."""


class ConfigError(SimCatError, ValueError):
    """A run configuration failed validation.

    ``field`` names the offending entry using dotted notation.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
