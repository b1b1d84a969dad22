"""Exception hierarchy shared across the package."""


class TveError(Exception):
    """Base class for all package errors."""


class InvalidSizeError(TveError, ValueError):
    pass


class SchemaError(TveError, ValueError):
    pass


class EmptyDataError(TveError, ValueError):
    pass


class InputError(TveError, ValueError):
    """Non-finite or malformed numeric input."""


class SeparationError(TveError):
    """Logistic fit diverged, typically because the classes are separable."""

    def __init__(self, message, coef=None):
        super().__init__(message)
        self.coef = coef


class PositivityError(TveError):
    """Only one treatment arm is present in the data."""


class DegenerateFitError(TveError):
    """Every candidate learner failed to fit."""


class PsiDegenerateError(TveError):
    """A treatment-specific mean fell below the floor, so log(CRR) is unusable."""


class ScenarioError(TveError):
    """Every replication of a Monte-Carlo scenario failed."""


class ConfigError(TveError, ValueError):
    pass
