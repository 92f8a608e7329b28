"""Exception hierarchy shared by every module."""


class FreeEditError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(FreeEditError, ValueError):
    """Shapes or dimensions do not agree."""


class ContractError(FreeEditError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(FreeEditError, ValueError):
    """A binary or text file does not follow the expected layout."""


class GapError(FormatError):
    """A numbered frame sequence has a missing index."""


class ConfigError(FreeEditError, ValueError):
    """A scene or job configuration is invalid."""


class CacheMissError(FreeEditError, KeyError):
    """An injection pass asked for a (block, step) key that was never captured."""


class NumericalError(FreeEditError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(NumericalError):
    pass


class UndefinedRegionError(FreeEditError, ValueError):
    """A masked metric has no pixels left to average over."""
