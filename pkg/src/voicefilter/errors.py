"""Exception hierarchy shared across the pipeline."""


class VoiceFilterError(Exception):
    """Base class for all package errors."""


class DataError(VoiceFilterError):
    """Invalid input data, file format, or configuration (CLI exit code 2)."""


class NumericalError(VoiceFilterError):
    """Non-finite values or numerical non-convergence (CLI exit code 3)."""
