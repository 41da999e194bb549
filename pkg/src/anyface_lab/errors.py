"""Exception hierarchy shared by every module."""


class AnyFaceError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AnyFaceError, ValueError):
    pass


class NumericError(AnyFaceError, ArithmeticError):
    pass


class SupportError(AnyFaceError, ValueError):
    """KL divergence where q has zero mass but p does not."""


class InputError(AnyFaceError, ValueError):
    pass


class ParameterError(AnyFaceError, ValueError):
    pass


class NotPSDError(NumericError):
    pass


class RangeError(AnyFaceError, ValueError):
    """Pixel values on the tanh asymptotes; atanh is undefined there."""


class SplitError(AnyFaceError, ValueError):
    pass


class VocabularyError(AnyFaceError, KeyError):
    pass


class SampleCountError(AnyFaceError, ValueError):
    pass


class NegativeSamplingError(AnyFaceError, ValueError):
    pass


class PretrainingError(AnyFaceError, RuntimeError):
    def __init__(self, message, accuracy):
        super().__init__(message)
        self.accuracy = accuracy


class DivergenceError(AnyFaceError, RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ConfigError(AnyFaceError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
