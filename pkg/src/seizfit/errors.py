"""Exception hierarchy shared by all seizfit modules."""


class SeizfitError(Exception):
    """Base class for every error raised by this package."""


class ParameterDomainError(SeizfitError, ValueError):
    """A parameter or state lies outside its legal interval."""


class ShapeError(SeizfitError, ValueError):
    """Arrays that must agree in length do not."""


class IntegrationError(SeizfitError, ArithmeticError):
    """Base class for ODE solver failures."""


class StepBudgetError(IntegrationError):
    def __init__(self, message, n_completed=0):
        super().__init__(message)
        self.n_completed = n_completed


class StiffnessError(IntegrationError):
    """Step size fell below the representable resolution of the time axis."""


class NumericError(IntegrationError):
    """Non-finite derivative or persistent negative populations."""


class ParseError(SeizfitError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyLogError(SeizfitError, ValueError):
    pass


class EmptyWindowError(SeizfitError, ValueError):
    pass


class FitError(SeizfitError):
    pass


class UnfittableProblemError(FitError):
    """Every start point failed to integrate."""


class DegenerateProblemError(FitError):
    """No free parameters remain after pinning."""
