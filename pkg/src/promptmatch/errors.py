"""Exception types raised across the package."""


class PromptMatchError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PromptMatchError, ValueError):
    """Input data is non-finite or otherwise unusable."""


class ShapeError(PromptMatchError, ValueError):
    pass


class ParameterError(PromptMatchError, ValueError):
    """A scalar/config parameter is outside its valid range."""


class OutOfBoundsError(PromptMatchError, ValueError):
    pass


class MissingCategoryError(PromptMatchError, KeyError):
    pass


class UnsupportedFeatureError(PromptMatchError, RuntimeError):
    """Requested functionality needs an optional dependency or weights that are absent."""


class IngestionError(PromptMatchError, OSError):
    pass


class ParseError(PromptMatchError, ValueError):
    """Malformed record in a dataset, report or checkpoint file."""


class TrainingError(PromptMatchError, RuntimeError):
    pass
