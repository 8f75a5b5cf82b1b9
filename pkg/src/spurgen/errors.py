"""Exception types shared across the toolkit."""


class SpurgenError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SpurgenError, ValueError):
    """A config value, adapter contract, or flag combination is invalid."""


class DegenerateFeatureError(SpurgenError, ValueError):
    """A feature vector has (near-)zero norm or non-finite entries."""


class SingularityError(SpurgenError, ValueError):
    """A denoising coefficient is zero where the formula divides by it."""


class SamplerUnavailableError(ConfigurationError):
    """The adapter-native sampler was requested but the adapter has none."""


class ShortfallError(SpurgenError, RuntimeError):
    """Fewer images qualify than were requested."""

    def __init__(self, message: str, qualifying: int, requested: int):
        super().__init__(message)
        self.qualifying = qualifying
        self.requested = requested


class TrainingDivergedError(SpurgenError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class StageError(SpurgenError, RuntimeError):
    """A pipeline stage failed; carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ReplayError(SpurgenError, RuntimeError):
    """A manifest's recorded inputs no longer match the filesystem."""
