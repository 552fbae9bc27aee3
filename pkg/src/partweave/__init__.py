"""Concept + component personalization for text-to-image diffusion backbones.

Trains a pair (one concept, one component) from a few masked reference
images in two stages: a joint warm-up, then a balancing stage in which the
online denoiser optimizes the hardest sample while a momentum denoiser
preserves the rest. Out-of-mask image content is suppressed by scheduled
Gaussian degradation.
"""

__version__ = "0.1.0"

from .errors import (
    BackendUnavailableError,
    CheckpointError,
    ConfigError,
    EvaluationError,
    IngestionError,
    PartweaveError,
    TrainingError,
)

__all__ = [
    "__version__",
    "PartweaveError",
    "IngestionError",
    "ConfigError",
    "CheckpointError",
    "TrainingError",
    "EvaluationError",
    "BackendUnavailableError",
]
