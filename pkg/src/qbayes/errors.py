"""Exception types shared across the package."""


class QBayesError(Exception):
    """Base class for all package errors."""


class DomainError(QBayesError):
    """Parameter point outside the model's domain box."""


class ControlError(QBayesError):
    """Invalid experimental control (negative time, m < 1, ...)."""


class GradientSingularityError(QBayesError):
    """Gradient requested at or next to a zero of the likelihood."""


class DegenerateEnsembleError(QBayesError):
    """Every particle ended up with zero likelihood."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateUncertaintyError(QBayesError):
    """A heuristic needed a spread but the distribution has collapsed."""


class ControlVariateSingularityError(QBayesError):
    """Control variates requested at a point where some datum has zero likelihood."""


class ConfigError(QBayesError):
    """Invalid experiment configuration; carries the offending key path."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class FitError(QBayesError):
    """Scaling fit received unusable input."""
