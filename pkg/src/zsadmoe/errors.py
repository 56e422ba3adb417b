"""Exception hierarchy.

User-facing errors (bad input, bad config, bad files) derive from
``UserError``; numeric failures derive from ``NumericError``. The CLI maps the
former to exit code 1 and the latter to exit code 2.
"""


class ZsadError(Exception):
    pass


class UserError(ZsadError):
    pass


class NumericError(ZsadError):
    pass


class DimensionError(UserError, ValueError):
    pass


class ParameterError(UserError, ValueError):
    pass


class InputError(UserError, ValueError):
    pass


class ConfigurationError(UserError, ValueError):
    pass


class DatasetError(UserError, OSError):
    pass


class ValidationError(UserError, ValueError):
    pass


class FormatError(UserError, ValueError):
    pass


class UndefinedMetricError(UserError, ValueError):
    pass


class EvaluationError(NumericError, ArithmeticError):
    pass


class NormalizationError(NumericError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InternalError(NumericError, RuntimeError):
    pass
