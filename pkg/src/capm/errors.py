"""Exception hierarchy shared by every capm module."""


class CapmError(Exception):
    """Base class for all errors raised by capm."""


class ValidationError(CapmError, ValueError):
    """A network description does not satisfy the supported architecture.

    ``layer_index`` points at the offending record when it is known.
    """

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class PatternViolation(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class MaxpoolWithoutRelu(ValidationError):
    pass


class NegativeInput(CapmError, ValueError):
    pass


class InvertedBounds(CapmError, ValueError):
    pass


class DegenerateInterval(CapmError, ValueError):
    pass


class DimensionTooLarge(CapmError, ValueError):
    pass


class EmptyDataset(CapmError, ValueError):
    pass


class ParseError(CapmError, ValueError):
    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class BadMagic(ParseError):
    pass


class Truncated(ParseError):
    pass


class LabelOutOfRange(ParseError):
    pass
