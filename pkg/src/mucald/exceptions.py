"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes are incompatible; the message names both shapes."""


class ConfigError(ValueError):
    """Raised for invalid configuration values; the message names the field."""


class DataError(ValueError):
    """Raised for invalid data contents (bad class ids, non-finite values)."""


class StateError(RuntimeError):
    """Raised when an operation is called in the wrong order (e.g. backward before forward)."""


class FrameError(ValueError):
    """Raised when an activation frame fails to decode; includes the byte offset."""


class HarnessError(RuntimeError):
    """Raised when an attack or validation harness cannot run (e.g. too few intercepts)."""


def check_shapes_match(a_shape, b_shape, context=""):
    if tuple(a_shape) != tuple(b_shape):
        prefix = f"{context}: " if context else ""
        raise ShapeMismatchError(f"{prefix}shape {tuple(a_shape)} does not match {tuple(b_shape)}")
