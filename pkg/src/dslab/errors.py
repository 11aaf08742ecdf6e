"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its preconditions."""


class ConfigError(ValueError):
    """Invalid experiment configuration. ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NotReadyError(RuntimeError):
    """A buffer or sampler does not hold enough data yet."""


class DegenerateInputError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf; training must stop."""


class DivergenceError(FloatingPointError):
    def __init__(self, message, *, step=None, weight_norm=None):
        super().__init__(message)
        self.step = step
        self.weight_norm = weight_norm
