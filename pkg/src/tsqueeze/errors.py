"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class TSQError(Exception):
    category = "error"


class ShapeError(TSQError, ValueError):
    category = "shape"


class SingularityError(TSQError, ArithmeticError):
    category = "singular"

    def __init__(self, pivot, value=None):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite (pivot {pivot} = {value})")


class NumericalError(TSQError, ArithmeticError):
    category = "numerical"


class ConfigError(TSQError, ValueError):
    category = "config"


class DataError(TSQError, ValueError):
    category = "data"


class TSQIOError(TSQError, OSError):
    category = "io"

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class StateError(TSQError, RuntimeError):
    category = "state"


class TrainingDiverged(NumericalError):
    """Raised when the loss goes non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None, checkpoint_path=None):
        self.checkpoint = checkpoint
        self.checkpoint_path = checkpoint_path
        super().__init__(message)
