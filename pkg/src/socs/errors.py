"""Exception hierarchy; each family maps to a CLI exit code."""


class SocsError(Exception):
    exit_code = 1


class ConfigError(SocsError):
    exit_code = 2


class DataError(SocsError, ValueError):
    exit_code = 3


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class InvalidParams(DataError):
    pass


class InvalidBin(DataError):
    pass


class EmptyView(DataError):
    pass


class EmptyEval(DataError):
    pass


class NumericalError(SocsError, ArithmeticError):
    exit_code = 4


class SingularSystem(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class NoModel(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, step=None, sample_ids=()):
        super().__init__(message)
        self.step = step
        self.sample_ids = tuple(sample_ids)
