"""Shared exception types mapped to CLI exit codes."""


class TrainingError(RuntimeError):
    """Training cannot proceed (e.g. every anchor was skipped)."""


class SamplingError(ValueError):
    """A sampling pool required by the algorithm is empty."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the math requires finite ones."""
