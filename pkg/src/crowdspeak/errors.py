"""Exception hierarchy. The CLI maps the three top-level families to exit codes."""


class CrowdspeakError(Exception):
    exit_code = 1


class InputError(CrowdspeakError):
    """A required input is missing, unreadable or malformed."""

    exit_code = 2


class ValidationError(CrowdspeakError):
    """Configuration or data failed validation."""

    exit_code = 3


class LeakageError(CrowdspeakError):
    """A model was fitted on data whose group also appears in its test fold."""

    exit_code = 4


class ParseError(InputError):
    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


class SchemaError(InputError):
    pass


class FormatError(InputError):
    """Binary file with a bad header or truncated body."""

    def __init__(self, path, offset, msg):
        self.path, self.offset = str(path), offset
        super().__init__(f"{path} @ byte {offset}: {msg}")


class RangeError(ValidationError, IndexError):
    pass


class MissingDataError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class DegenerateDataError(ValidationError):
    pass


class FitError(CrowdspeakError):
    pass


class DivergenceError(FitError):
    pass


class MetricError(ValidationError):
    """Metric undefined for the given input (e.g. a single class)."""
