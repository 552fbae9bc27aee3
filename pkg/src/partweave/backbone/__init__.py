"""Diffusion backbones: the deterministic CPU toy model and the real adapter."""

from __future__ import annotations

from .base import AdapterState, Backbone, EncodedPrompt, NoisyLatent
from .toy import ToyBackbone

__all__ = [
    "AdapterState",
    "Backbone",
    "EncodedPrompt",
    "NoisyLatent",
    "ToyBackbone",
    "create_backbone",
]


def create_backbone(kind: str, **kwargs) -> Backbone:
    """Instantiate a backbone by config name ('toy' or 'real')."""
    if kind == "toy":
        return ToyBackbone(**kwargs)
    if kind == "real":
        from .real import RealBackbone

        return RealBackbone(**kwargs)
    from ..errors import ConfigError

    raise ConfigError(f"unknown backbone {kind!r}, expected 'toy' or 'real'")
