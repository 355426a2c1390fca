"""
Exception hierarchy for antkit.
Every error raised on purpose by the toolkit derives from AntKitError so the
command line can map it to an exit code.
"""


class AntKitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AntKitError, ValueError):
    """Tensor shapes do not agree with the operation or its spec."""


class DegenerateBatchError(DimensionError):
    """Batch statistics requested over fewer than two values per channel."""


class ConfigurationError(AntKitError, ValueError):
    """A layer, block or network configuration violates its invariants."""


class SpecParseError(ConfigurationError):
    """A network spec document could not be parsed or validated."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f'line {line}')
        if field:
            where.append(field)
        super().__init__(f'{", ".join(where)}: {message}' if where else message)


class GraphStateError(AntKitError, RuntimeError):
    """backward() called without a recorded forward graph."""


class FormatError(AntKitError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f'{message} (byte offset {offset})'
        super().__init__(message)


class AnalysisError(AntKitError, ValueError):
    """The dependency analyzer was handed something it cannot analyze."""


class DivergenceError(AntKitError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message)
