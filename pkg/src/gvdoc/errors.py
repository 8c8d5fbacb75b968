"""Exception hierarchy shared by every gvdoc module."""


class GVDocError(Exception):
    """Base class for all gvdoc errors."""


class FormatError(GVDocError):
    """Input text or bytes are not in the expected container format."""


class RowError(FormatError):
    """A single row of a tabular input could not be parsed."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(FormatError):
    """A JSON document violates its schema; ``path`` is a JSON pointer."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvariantError(GVDocError):
    """A domain invariant (geometry, shapes, config) does not hold."""


class EmptyDocumentError(GVDocError):
    """A document has no tokens."""


class NonFiniteError(GVDocError):
    """A tensor op produced NaN or Inf."""


class BackwardError(GVDocError):
    """Backward pass requested for a value that has no recorded tape."""


class ShapeError(InvariantError):
    """Array shapes disagree."""


class ConfigError(FormatError):
    """A configuration file has an unknown key or a value of the wrong type."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
