"""Exception hierarchy shared by all modules."""


class DdnflError(Exception):
    """Base class for every error raised by this package."""


class InvalidDimensions(DdnflError, ValueError):
    pass


class DataTooShort(DdnflError, ValueError):
    pass


class NotPersistentlyExciting(DdnflError):
    pass


class Diverged(DdnflError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class MalformedN(DdnflError, ValueError):
    pass


class NumericalFailure(DdnflError, ArithmeticError):
    pass


class InvalidInterval(DdnflError, ValueError):
    pass


class InvalidMultiplier(DdnflError, ValueError):
    pass


class SingularTransform(DdnflError, ArithmeticError):
    pass


class SolverError(DdnflError):
    """The conic solver failed numerically (distinct from infeasibility)."""


class IllConditionedCertificate(DdnflError, ArithmeticError):
    pass


class DomainError(DdnflError, ValueError):
    pass


class ExpertSynthesisFailed(DdnflError):
    pass


class SdpInfeasibleAtIteration(DdnflError):
    def __init__(self, iteration, status, result=None):
        self.iteration = iteration
        self.status = status
        self.result = result
        super().__init__(f"stability SDP infeasible at outer iteration {iteration} ({status})")


class NotConverged(DdnflError):
    """Raised when the outer loop exhausts its budget; ``result`` holds the best iterate."""

    def __init__(self, result, message=None):
        self.result = result
        super().__init__(message or "outer loop did not reach the residual threshold")


class InnerLoopStalled(DdnflError):
    def __init__(self, outer_iteration, result=None):
        self.outer_iteration = outer_iteration
        self.result = result
        super().__init__(f"inner fine-tuning loop stalled at outer iteration {outer_iteration}")
