"""
Exceptions shared by the numerics, control and experiment layers.
"""
from __future__ import annotations


class SmpcError(Exception):
    """Base class for everything this package raises on purpose."""


class SingularError(SmpcError):
    pass


class DivergenceError(SmpcError):
    pass


class DimensionError(SmpcError, ValueError):
    pass


class DomainError(SmpcError, ValueError):
    pass


class InfeasibleError(SmpcError):
    pass


class NonConvergenceError(SmpcError):
    pass


class AllRejectedError(SmpcError):
    pass


class CertificateError(SmpcError):
    pass


class ConfigParseError(SmpcError):
    """TOML syntax error; line/column are 1-based, 0 when unknown."""

    def __init__(self, message: str, line: int = 0, column: int = 0) -> None:
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigValidationError(SmpcError):
    """Config is well-formed but a field is missing, unknown or out of range."""

    def __init__(self, message: str, fields: list[str] | None = None) -> None:
        super().__init__(message)
        self.fields = fields or []
