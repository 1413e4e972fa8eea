"""
Exception hierarchy shared by every pipeline stage.
Messages render as "[module] parameter: detail" so a failing run names
the stage and the offending input.
"""

from typing import Optional


class GmcError(Exception):
    def __init__(self, module: str, parameter: str, detail: str):
        self.module = module
        self.parameter = parameter
        self.detail = detail
        super().__init__(f'[{module}] {parameter}: {detail}')


class DimensionError(GmcError, ValueError):
    pass


class ValidationError(GmcError, ValueError):
    pass


class ParameterError(GmcError, ValueError):
    pass


class SchemaError(GmcError, ValueError):
    pass


class ConfigError(GmcError, ValueError):
    pass


class ParseError(GmcError, ValueError):
    def __init__(self, module: str, row: int, column: str, detail: str):
        self.row = row
        self.column = column
        super().__init__(module, f'row {row}, column {column!r}', detail)


class NumericalError(GmcError, ArithmeticError):
    pass


class TrainingDiverged(NumericalError):
    """Raised when the training loss becomes non-finite; keeps the trace up to the failure."""

    def __init__(self, module: str, parameter: str, detail: str, trace: Optional[object] = None):
        self.trace = trace
        super().__init__(module, parameter, detail)
