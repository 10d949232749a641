"""Exception hierarchy shared by all modules."""


class SepcrossError(Exception):
    """Base class for domain and model errors (CLI exit status 1)."""


class DomainError(SepcrossError):
    """A state left the system's domain box."""


class GeometryError(SepcrossError):
    """Saddle, separatrix or level-orbit construction failed."""


class NearSeparatrixError(GeometryError):
    """Point or energy too close to the separatrix for action-angle variables."""


class PreconditionError(SepcrossError):
    """An operation was called on inputs that violate its precondition."""


class ConditionCViolation(SepcrossError):
    """Separatrix fluxes are not all positive."""


class IntegrationError(SepcrossError):
    """Step-size underflow or iteration limit in an integrator."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ConfigError(Exception):
    """Invalid run configuration (CLI exit status 2)."""
