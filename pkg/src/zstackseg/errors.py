"""Exception taxonomy shared by the pipeline stages.

Plain ValueError is used for bad in-memory arguments (shape mismatches,
out-of-range parameters); the classes below cover everything that maps to
a CLI exit code.
"""


class PipelineError(Exception):
    """Base class for pipeline failures."""


class StorageError(PipelineError):
    """I/O failure reading or writing an artifact; message names the path."""


class FormatError(PipelineError):
    """A file exists but its contents violate the expected format."""


class ConfigError(PipelineError):
    """Invalid configuration value or checkpoint/architecture mismatch."""


class PipelineOrderError(PipelineError):
    """A stage was run before its prerequisite artifact exists."""
