"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures to distinct process statuses without a lookup table of its own.
"""

from __future__ import annotations


class PsCloneError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class SchemaError(PsCloneError):
    """A declared column is missing or a covariate layout does not match."""

    exit_code = 7


class ValidationError(PsCloneError):
    """Input values violate a load-time rule (non-binary treatment, duplicate ids...)."""

    exit_code = 7


class EscrowViolation(PsCloneError):
    """Outcome data was requested before the design was frozen and escrow released."""

    exit_code = 5


class ProvenanceError(PsCloneError):
    """Artifacts were built from different source data."""

    exit_code = 4


class BinningError(PsCloneError):
    exit_code = 7


class SupportError(PsCloneError):
    """Trimming or matching left an arm without units."""

    exit_code = 7


class DesignNotReady(PsCloneError):
    """Balance threshold not met and no override recorded."""

    exit_code = 6


class SingularDesignError(PsCloneError):
    exit_code = 7


class EmptySelectionError(PsCloneError):
    exit_code = 7


class EvaluationError(PsCloneError):
    exit_code = 7


class ConfigError(PsCloneError):
    exit_code = 7


class PrerequisiteError(PsCloneError):
    """A pipeline step was invoked before the steps it depends on."""

    exit_code = 3
