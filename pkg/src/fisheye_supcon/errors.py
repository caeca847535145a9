"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A value or configuration is outside its allowed range."""


class ParseError(ValueError):
    """A text input could not be parsed."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ExtractionError(ValueError):
    """A bounding box cannot be turned into a patch."""


class DegenerateLabelsError(ValueError):
    """No anchor in a batch has a positive partner."""


class DegenerateEmbeddingError(ArithmeticError):
    """An embedding has zero norm and cannot be normalized."""


class StaleCacheError(RuntimeError):
    """A forward cache no longer matches the model parameters."""
