"""Exception types raised across the package."""


class GfomError(Exception):
    """Base class for all package errors."""


class NotPositiveSemidefinite(GfomError, ValueError):
    pass


class SigmaNotPsd(NotPositiveSemidefinite):
    pass


class SingularSigma(GfomError, ValueError):
    pass


class MissingHistory(GfomError, ValueError):
    pass


class NonFinite(GfomError, FloatingPointError):
    """Raised when an iteration produces NaN or Inf.

    The offending (0-based) step index is available as ``step``.
    """

    def __init__(self, step, what="iterate"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


class BasisExhausted(GfomError, RuntimeError):
    pass


class DimensionMismatch(GfomError, ValueError):
    pass


class InconsistentRealization(GfomError, ValueError):
    pass


class ConfigInvalid(GfomError, ValueError):
    """Carries a list of ``(field, message)`` pairs in ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        msg = "; ".join(f"{k}: {v}" for k, v in self.errors)
        super().__init__(f"invalid config: {msg}")


class NonDifferentiableKind(UserWarning):
    """A Jacobian-based estimate touched a kink (relu, soft threshold)."""
