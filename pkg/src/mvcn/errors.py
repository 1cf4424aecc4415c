"""Exception hierarchy shared by every module."""


class MVCNError(Exception):
    """Base class for all package errors."""


class NonFiniteInput(MVCNError, ValueError):
    pass


class ShapeMismatch(MVCNError, ValueError):
    pass


class DerivativeUnavailable(MVCNError):
    pass


class GridMismatch(MVCNError, ValueError):
    pass


class LengthMismatch(MVCNError, ValueError):
    pass


class UnsupportedSize(MVCNError, ValueError):
    pass


class NonFiniteState(MVCNError, FloatingPointError):
    """Raised when a particle state stops being finite during stepping."""

    def __init__(self, step, particle, message=None):
        self.step = step
        self.particle = particle
        super().__init__(message or f"non-finite state at step {step}, particle {particle}")


class NotInitialized(MVCNError, RuntimeError):
    pass


class PilotOutOfSync(MVCNError, RuntimeError):
    pass


class MissingDerivative(MVCNError):
    pass


class EllipticityFailure(MVCNError):
    """The diffusion matrix is not uniformly elliptic on the visited states."""

    def __init__(self, report, message=None):
        self.report = report
        super().__init__(message or f"ellipticity check failed: {report}")


class ConfigError(MVCNError, ValueError):
    pass
