"""Exception hierarchy shared by all modules."""


class SirpDoaError(Exception):
    """Base class for errors raised by this package."""


class DomainError(SirpDoaError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigurationError(SirpDoaError, ValueError):
    """Inconsistent dimensions or an invalid experiment configuration."""


class NumericalError(SirpDoaError, ArithmeticError):
    """A numerical failure an estimator run cannot recover from."""


class SingularityError(NumericalError):
    """A matrix that must be full rank / positive definite is not."""


class DegenerateResidualError(NumericalError):
    """A snapshot residual vanished where a division by it is required."""


class BracketError(NumericalError):
    """A root-finding bracket does not contain a sign change."""


class ShapeClampWarning(RuntimeWarning):
    """The texture shape root fell outside its bracket and was clamped."""
