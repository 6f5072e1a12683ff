"""
Errors - Exception hierarchy for the DL-HIM workbench

Solver failures are reported as verdicts on the trace. Everything raised
here is a contract violation the caller has to deal with.
"""

from typing import Optional


class DlhimError(Exception):
    """Base class for all workbench errors."""


class ConfigError(DlhimError):
    """Invalid configuration value or file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GrfFactorizationError(DlhimError):
    """Covariance factorization failed even after jitter escalation."""


class SingularSystemError(DlhimError):
    """Zero pivot during a direct tridiagonal solve."""


class SmootherError(DlhimError):
    """Smoother cannot be applied (zero diagonal entry, or system too large for dense diagnostics)."""

    def __init__(self, row: Optional[int] = None, message: Optional[str] = None):
        self.row = row
        super().__init__(message or f"zero diagonal entry at row {row}")


class NonFiniteError(DlhimError):
    """Non-finite loss, gradient or iterate during training."""

    def __init__(self, message: str, batch_index: Optional[int] = None,
                 cycle: Optional[int] = None):
        self.batch_index = batch_index
        self.cycle = cycle
        where = []
        if batch_index is not None:
            where.append(f"batch index {batch_index}")
        if cycle is not None:
            where.append(f"cycle {cycle}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CheckpointError(DlhimError):
    """Unreadable, truncated or incompatible checkpoint."""


class DatasetError(DlhimError):
    """Dataset missing, corrupt, or incompatible with the objective."""
