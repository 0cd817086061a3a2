#!/usr/bin/env python3
"""
Exception hierarchy for EncDec Lab.

Every exception carries a short ``category`` string so the CLI can print a
single machine-parsable line and pick an exit code.
"""


class LabError(Exception):
    """Base class for all lab failures."""

    category = "runtime"


class DomainError(LabError, ValueError):
    """Invalid numeric argument or state."""

    category = "domain"


class ShapeError(DomainError):
    """Operand shapes do not line up."""


class NonFiniteError(DomainError):
    """A forward primitive or gradient produced NaN/Inf."""


class ModelConfigError(LabError):
    """ModelConfig invariants violated; message lists every violation."""

    category = "config"

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model config: " + "; ".join(self.violations))


class UnsupportedOperationError(LabError):
    """Operation not defined for this architecture."""


class CapacityError(LabError):
    """A length exceeded a configured cap."""

    category = "capacity"

    def __init__(self, message, cap_name=None, offending=None):
        self.cap_name = cap_name
        self.offending = offending
        super().__init__(message)


class AlignmentError(LabError):
    """Teacher slice does not fit the teacher sequence."""


class CheckpointError(LabError):
    category = "checkpoint"


class BenchError(LabError):
    """Too few valid benchmark trials."""


class ConfigError(LabError):
    """Run configuration missing, unparsable or invalid."""

    category = "config"


class UsageError(LabError):
    """Bad command-line usage, e.g. an unknown override key."""

    category = "usage"
