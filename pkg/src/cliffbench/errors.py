"""Exception types shared across the package.

Each error names the stage that raised it; the CLI maps these onto
exit codes (2 for input/schema problems, 3 for infeasible split
constraints, 4 for internal invariant violations).
"""

from __future__ import annotations


class CliffBenchError(Exception):
    """Base class for all package errors."""


class SchemaError(CliffBenchError):
    """Input table is malformed: missing columns, bad header, wrong format."""


class RowError(SchemaError):
    """A specific input row failed validation; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConflictError(SchemaError):
    """Duplicate molecule id with conflicting payload."""


class ParseError(CliffBenchError):
    """Structure string rejected; carries the byte offset of the offending token."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class EmptyStructureError(CliffBenchError):
    """Fingerprint requested for a structure with no atoms."""


class DimensionError(CliffBenchError):
    """Operands disagree on fingerprint width or array length."""


class InsufficientDataError(CliffBenchError):
    """Fewer molecules than the operation needs (for example pair generation on < 2)."""


class InfeasibleSplitError(CliffBenchError):
    """No assignment satisfies the split constraints with the requested fractions."""


class DegenerateNormalizationError(CliffBenchError):
    """Severity normalizer is zero or undefined, so scores cannot be scaled."""


class CorruptArtifactError(CliffBenchError):
    """Split artifact file violates a structural invariant; names the invariant."""
