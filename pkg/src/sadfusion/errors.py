"""Exception types raised across the package."""


class SadFusionError(Exception):
    """Base class for package errors."""


class ConfigError(SadFusionError):
    pass


class IngestionError(SadFusionError):
    """A frame could not be read from disk."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame


class FormatError(IngestionError):
    """Files were readable but inconsistent (dimensions, headers)."""


class GenerationError(SadFusionError):
    pass


class DegenerateBindingError(SadFusionError):
    """Every blend weight of a surfel underflowed to zero."""


class SolverError(SadFusionError):
    pass
