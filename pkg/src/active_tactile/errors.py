class ActiveTactileError(Exception):
    pass


class ConfigurationError(ActiveTactileError, ValueError):
    """Bad dimensions or invalid configuration values."""


class GradientError(ActiveTactileError, FloatingPointError):
    """Loss is not finite; ``node`` names the first non-finite recorded operation."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ModelDivergenceError(ActiveTactileError, FloatingPointError):
    pass


class FilterDivergenceError(ActiveTactileError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (timestep {step})")
        self.step = step


class LossError(ActiveTactileError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (timestep {step})")
        self.step = step


class DatasetError(ActiveTactileError):
    pass


class SerializationError(ActiveTactileError):
    pass


class VersionMismatchError(SerializationError):
    def __init__(self, what, expected, found):
        super().__init__(f"{what} format version mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found
