"""Exception types shared across the pipeline."""


class NodulePipeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(NodulePipeError):
    """Malformed, truncated, or unsupported serialized data (headers, CSV, model files)."""


class ValidationError(NodulePipeError):
    """Invalid values or broken call preconditions (ranges, shapes, frames, config)."""
