"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed or violates an invariant."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component is NaN or infinite."""

    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f"non-finite loss component '{component}': {value!r}")


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not match the expected layout."""
