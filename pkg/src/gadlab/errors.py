"""Exception types shared across gadlab."""


class GadlabError(Exception):
    pass


class ConfigError(GadlabError, ValueError):
    """Invalid configuration value or key."""


class DimensionError(GadlabError, ValueError):
    pass


class UsageError(GadlabError, RuntimeError):
    """API called in a state where the operation is undefined."""


class ClosedSetError(GadlabError, KeyError):
    pass


class DecodeError(GadlabError, ValueError):
    pass


class CapacityError(GadlabError, RuntimeError):
    pass


class AlignmentError(GadlabError, ValueError):
    pass


class DataError(GadlabError, ValueError):
    pass


class EmptyPoolError(GadlabError, ValueError):
    pass


class IntegrityError(GadlabError, IOError):
    pass


class DependencyError(GadlabError, FileNotFoundError):
    pass


class DivergenceError(GadlabError, FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class UndefinedMetric(GadlabError, ValueError):
    """Raised when a metric has no eligible inputs (instead of reporting 0)."""
