"""Exception types shared across the harness."""

from __future__ import annotations


class RepairEvalError(Exception):
    """Base class for all harness errors."""


class DatasetError(RepairEvalError):
    """A benchmark file failed to load or normalize."""


class ConfigurationError(RepairEvalError):
    """Bad run configuration, including missing or rejected credentials."""


class InfrastructureError(RepairEvalError):
    """Environment failure that aborts the run (not recorded as data)."""


class TransientProviderError(RepairEvalError):
    """A retryable provider failure (connection drop, 429, 5xx)."""


class ProviderFailure(RepairEvalError):
    """Provider gave no completion after the retry budget was spent."""


class ScriptedGapError(RepairEvalError):
    """The scripted provider has no entry for a requested (task_id, round)."""


class LedgerConflictError(RepairEvalError):
    """A second writer, or a duplicate (run_id, task_id, round) record."""


class LedgerCorruptionError(RepairEvalError):
    """A ledger file could not be parsed."""


class ResumeMismatchError(RepairEvalError):
    """Run directory manifest does not match the requested configuration."""


class MixedBenchmarkError(RepairEvalError):
    """A single-benchmark table was asked to mix benchmarks."""
