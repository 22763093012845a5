"""Exception hierarchy shared by the data, model, and training layers."""


class SPerceptronError(Exception):
    pass


# data layer (CLI exit 3)

class DataError(SPerceptronError):
    pass


class BadMagicError(DataError, ValueError):
    pass


class TruncatedError(DataError, ValueError):
    pass


class LabelOutOfRangeError(DataError, ValueError):
    pass


class EmptyDatasetError(DataError, ValueError):
    pass


# model shape / file problems (CLI exit 5)

class ModelError(SPerceptronError):
    pass


class ShapeMismatchError(ModelError, ValueError):
    pass


class BadHeaderError(ModelError, ValueError):
    pass


class VersionMismatchError(ModelError, ValueError):
    pass


class ModelTruncatedError(ModelError, TruncatedError):
    pass


class NonFiniteParameterError(ModelError, ValueError):
    pass


# argument errors raised by the numerical kernels

class InputTooShortError(SPerceptronError, ValueError):
    pass


class NotSquareError(SPerceptronError, ValueError):
    pass


class TooFewOutputsError(SPerceptronError, ValueError):
    pass


class BadLabelError(SPerceptronError, ValueError):
    pass


class SizeOutOfRangeError(SPerceptronError, ValueError):
    pass


# training (CLI exit 4)

class NonFiniteGradientError(SPerceptronError, FloatingPointError):
    pass


class DivergenceDetected(SPerceptronError, FloatingPointError):
    """Mean batch loss became NaN or infinite."""
