"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SceneGraftError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SceneGraftError, ValueError):
    pass


class ScheduleError(SceneGraftError, ValueError):
    pass


class ResolutionError(SceneGraftError, ValueError):
    """A mask pyramid is missing a level the caller needs."""


class MaskValidationError(SceneGraftError, ValueError):
    pass


class ConfigError(SceneGraftError, ValueError):
    pass


class InversionDivergenceError(SceneGraftError, ArithmeticError):
    def __init__(self, timestep: int, message: str | None = None):
        self.timestep = timestep
        super().__init__(message or f"non-finite latent during inversion at timestep index {timestep}")


class DegenerateMaskError(SceneGraftError):
    """The subject mask is empty at some pyramid level."""

    def __init__(self, resolution, message: str | None = None):
        self.resolution = resolution
        super().__init__(message or f"subject mask is empty at resolution {resolution}")


class CacheMissError(SceneGraftError, KeyError):
    def __init__(self, layer_index: int, timestep: int):
        self.layer_index = layer_index
        self.timestep = timestep
        super().__init__(f"no reference key/value entry for layer {layer_index} at timestep {timestep}")

    def __str__(self) -> str:
        return self.args[0]


class InsertionFailureError(SceneGraftError):
    """No person could be detected after the first pass (including the retry)."""


class TransportError(SceneGraftError):
    """An external client (segmentation, embedder, LPIPS) failed."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
