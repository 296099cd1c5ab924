"""Exception types shared across the package."""


class AfdError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(AfdError, ValueError):
    pass


class NumericalFailure(AfdError, ArithmeticError):
    """Iterative kernel hit its iteration cap or lost numerical sense."""


class EmptySet(AfdError):
    pass


class Unbounded(AfdError):
    pass


class DimensionTooLarge(AfdError, ValueError):
    pass


class DegenerateInput(AfdError, ValueError):
    pass


class NotSymmetric(AfdError, ValueError):
    pass


class SingularShape(AfdError, ArithmeticError):
    pass


class NotPositiveDefinite(AfdError, ValueError):
    pass


class UnboundedTubeShape(AfdError, ValueError):
    pass


class NotABox(AfdError, ValueError):
    pass


class InfeasibleOcp(AfdError):
    pass


class ValidationError(AfdError, ValueError):
    """Config validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class ParseError(AfdError, ValueError):
    pass
