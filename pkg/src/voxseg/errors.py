"""Exception types shared across the package."""


class VoxsegError(Exception):
    """Base class for all domain errors (CLI maps these to exit code 1)."""


class NiftiError(VoxsegError):
    """Malformed or unsupported NIfTI file."""


class ManifestError(VoxsegError):
    """Invalid dataset manifest."""


class ConfigError(VoxsegError):
    """Invalid pipeline configuration."""


class SegmenterError(VoxsegError):
    """External segmenter subprocess failed."""


class PipelineError(VoxsegError):
    """Pipeline precondition or state error."""
