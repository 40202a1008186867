"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical divergence with 3, and I/O or file-format failures
with 4.
"""


class TdlabError(Exception):
    """Base class for all package errors."""


class ConfigError(TdlabError):
    """Invalid configuration, argument, or precondition violation."""


class DivergenceError(TdlabError):
    """Non-finite values encountered during training or evaluation."""


class DataFormatError(TdlabError):
    """Malformed dataset, checkpoint, or run artifact on disk."""


class AnalysisError(TdlabError):
    """Analysis precondition failed (e.g. disconnected local graph)."""
