"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or spec values."""


class ShapeError(ValueError):
    """Tensor dimensions do not conform."""


class PlanError(ValueError):
    """An injection plan does not fit the model it is applied to."""


class VocabularyError(KeyError):
    """A conditioning label is not in the embedding vocabulary."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, dataset) is missing."""
