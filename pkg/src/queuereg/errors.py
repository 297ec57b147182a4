"""Exception hierarchy shared across the package."""


class QueueRegError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(QueueRegError, ValueError):
    """A model or configuration object was built with invalid parameters."""


class DomainError(QueueRegError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class PreconditionError(QueueRegError, ValueError):
    """An operation was invoked in a state its contract forbids."""


class StabilityError(QueueRegError, RuntimeError):
    """The simulated queue is unstable (offered load too close to one)."""


class NumericalError(QueueRegError, RuntimeError):
    """A numerical routine failed to meet its tolerance or bracket."""


class ConfigError(QueueRegError, ValueError):
    """A run configuration file is malformed or inconsistent."""
