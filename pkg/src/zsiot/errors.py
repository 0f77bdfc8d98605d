class ZSIoTError(Exception):
    """Base class for library errors."""


class ValidationError(ZSIoTError, ValueError):
    pass


class ConfigError(ZSIoTError):
    pass


class StateError(ZSIoTError, RuntimeError):
    """Raised when a component is used before it has been trained or loaded."""


class DivergenceError(ZSIoTError, FloatingPointError):
    pass
