"""Exception hierarchy shared by all modules."""


class SaeError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(SaeError):
    """A column named in the schema mapping is missing from the input."""


class ParseError(SaeError, ValueError):
    """A value could not be parsed; carries the offending row index."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class IntegrityError(SaeError):
    """Frame invariants are violated (duplicates, missing responses)."""


class DesignError(SaeError):
    """Sampling or cross-validation design cannot be realised."""


class FrameLookupError(SaeError, LookupError):
    """Requested domain/period does not exist in the frame."""


class ShapeError(SaeError, ValueError):
    """Array dimensions do not match."""


class SingularityError(SaeError):
    """Design matrix is rank deficient."""


class IdentifiabilityError(SaeError):
    """Too few domains or observations to identify the model."""


class FitError(SaeError):
    """A model could not be fitted."""


class EvaluationError(SaeError):
    """A characteristic could not be evaluated."""


class ConfigError(SaeError):
    """Invalid configuration or hyperparameter ranges."""


class ScenarioDomainError(SaeError, ValueError):
    """Auxiliary values outside the support of a scenario (e.g. log of x <= 0)."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class IterationFailure(SaeError):
    """A Monte Carlo or bootstrap iteration failed beyond the retry budget."""
