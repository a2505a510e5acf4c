"""Exception hierarchy shared across modules."""


class LdpmsError(Exception):
    """Base class for all package errors."""


class InputError(LdpmsError, ValueError):
    """Malformed or inconsistent arguments."""


class DomainError(LdpmsError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ConfigError(LdpmsError):
    """Invalid run or simulation configuration."""


class AssumptionViolation(LdpmsError):
    """A standing assumption on the model fails on the sampled data.

    ``assumption`` names the violated hypothesis, ``where`` carries the
    offending point when one is known.
    """

    def __init__(self, assumption, message, where=None):
        super().__init__(f"[{assumption}] {message}")
        self.assumption = assumption
        self.where = where


class EllipticityError(AssumptionViolation):
    def __init__(self, message, where=None):
        super().__init__("ellipticity", message, where)


class BoundDivergenceError(AssumptionViolation):
    def __init__(self, message):
        super().__init__("hartman-wintner", message)


class SimulationError(LdpmsError):
    """The Euler scheme produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(LdpmsError):
    """An optimizer stopped before reaching its tolerance.

    The best iterate found is attached as ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
