"""Exception types shared across the package."""


class PartweaveError(Exception):
    """Base class for all package-specific failures."""


class IngestionError(PartweaveError):
    """A pair config or one of its image/mask files is invalid."""


class ConfigError(PartweaveError):
    """A run config file or CLI override is invalid (usage error, exit 2)."""


class CheckpointError(PartweaveError):
    """A checkpoint file is missing, corrupt, or from an unknown format version."""


class TrainingError(PartweaveError):
    """Training aborted, e.g. on a non-finite loss."""


class EvaluationError(PartweaveError):
    """Evaluation inputs are incomplete or inconsistent."""


class BackendUnavailableError(PartweaveError):
    """The requested diffusion backend cannot be constructed in this environment."""
