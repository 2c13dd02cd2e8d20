class ForgeError(Exception):
    """Base class for pipeline errors."""


class GeometryError(ForgeError, ValueError):
    """Degenerate or invalid geometric input."""


class SamplingError(ForgeError, RuntimeError):
    pass


class TrainingError(ForgeError, RuntimeError):
    pass


class ConfigError(ForgeError, ValueError):
    pass


class MeshingError(ForgeError, RuntimeError):
    pass


class StageError(ForgeError, RuntimeError):
    """A pipeline stage failed; carries the stage name and its artifact paths."""

    def __init__(self, stage: str, message: str, paths=()):
        self.stage = stage
        self.paths = [str(p) for p in paths]
        where = f" (artifacts: {', '.join(self.paths)})" if self.paths else ""
        super().__init__(f"stage {stage!r} failed: {message}{where}")
