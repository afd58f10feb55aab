"""Exception hierarchy shared by all fedglmm modules."""


class FedGLMMError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(FedGLMMError, ValueError):
    """An argument is outside its documented domain."""


class AlignmentError(FedGLMMError, ValueError):
    """Variant identifiers of two inputs do not line up."""


class RankDeficientError(FedGLMMError, ValueError):
    """A matrix has lower rank than the requested number of components."""

    def __init__(self, message, rank):
        super().__init__(message)
        self.rank = rank


class SingularHessianError(FedGLMMError, ArithmeticError):
    """A Hessian could not be used for a Newton step or Wald inference."""

    def __init__(self, message, condition=None, min_eigenvalue=None):
        super().__init__(message)
        self.condition = condition
        self.min_eigenvalue = min_eigenvalue


class ConvergenceError(FedGLMMError, ArithmeticError):
    """An inner iteration did not converge."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class DataFormatError(FedGLMMError, ValueError):
    """A file could not be parsed; carries the path and line when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class ProtocolError(FedGLMMError):
    """A federation message was malformed or arrived out of order."""


class TransportError(FedGLMMError, ConnectionError):
    """A federation peer disconnected or could not be reached."""

    def __init__(self, message, site=None):
        super().__init__(message)
        self.site = site


class ConfigurationError(FedGLMMError):
    """Site and coordinator disagree on the model configuration."""
