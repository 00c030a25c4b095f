"""Exception types raised across the ULC package."""

from typing import Optional


class UlcError(Exception):
    """Base class for every failure the CLI reports as error JSON."""

    def details(self) -> dict:
        return {}


class ConfigurationError(UlcError, ValueError):
    """Invalid configuration or hyper-parameter value."""


class ParseError(UlcError):
    """Malformed dataset or report file."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)

    def details(self) -> dict:
        return {"line": self.line, "field": self.field}


class ShapeError(UlcError, ValueError):
    """Array shape does not match the model or dataset."""


class ContractError(UlcError, ValueError):
    """Input violates an operation precondition (unnormalized rows, negative variance...)."""


class InsufficientDataError(UlcError):
    """Too few samples to fit a mixture."""


class TrainingDivergenceError(UlcError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def details(self) -> dict:
        return {"diagnostics": self.diagnostics}


class UndefinedMetricError(UlcError, ValueError):
    """Metric is undefined for the given input (e.g. AUC with one class)."""


class ReportIOError(UlcError):
    """Report or dataset could not be written or read."""

    def __init__(self, message: str, path: str):
        self.path = path
        super().__init__(f"{message}: {path}")

    def details(self) -> dict:
        return {"path": self.path}
