"""Exception hierarchy shared by every sirank module."""


class SirankError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(SirankError, ValueError):
    pass


class NonPositiveFeature(SirankError, ValueError):
    """A scale-sensitive feature was <= 0, so its log is undefined."""


class InconsistentQueryFeatures(SirankError, ValueError):
    pass


class AllZeroLabels(SirankError, ValueError):
    pass


class ParseError(SirankError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDataset(SirankError, ValueError):
    pass


class MissingColumn(SirankError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing column"


class TooFewQueries(SirankError, ValueError):
    pass


class InvalidConfig(SirankError, ValueError):
    pass


class PartitionMismatch(SirankError, ValueError):
    pass


class ShapeMismatch(SirankError, ValueError):
    pass


class NonFiniteLoss(SirankError, ArithmeticError):
    pass
