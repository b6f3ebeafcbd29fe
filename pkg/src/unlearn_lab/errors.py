class UnlearnLabError(Exception):
    """Base class for all package errors."""


class ParameterError(UnlearnLabError, ValueError):
    pass


class NumericError(UnlearnLabError, ArithmeticError):
    pass


class TrainingError(NumericError):
    """Loss became non-finite during optimisation."""


class FormatError(UnlearnLabError, ValueError):
    def __init__(self, msg: str, field: str | None = None):
        super().__init__(f"{msg} (field: {field})" if field else msg)
        self.field = field


class EmptySelectionError(UnlearnLabError):
    """No sample satisfied the selection rule."""
