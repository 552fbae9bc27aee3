"""Deterministic seed derivation.

Every random draw in a run is derived from (global seed, purpose tag,
indices), never from call order, so pipelined or re-entrant execution
reproduces the same numbers.
"""

from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: int | str) -> int:
    """Hash a (purpose, indices...) tuple to a stable 63-bit seed."""
    key = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


def generator(*parts: int | str) -> torch.Generator:
    """CPU generator seeded from a derived seed."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(*parts))
    return gen


def randn(shape: tuple[int, ...], dtype: torch.dtype, *parts: int | str) -> torch.Tensor:
    """Standard-normal tensor drawn from the derived seed."""
    return torch.randn(shape, generator=generator(*parts), dtype=dtype)


def randint(low: int, high: int, *parts: int | str) -> int:
    """Uniform integer in [low, high) drawn from the derived seed."""
    return int(torch.randint(low, high, (1,), generator=generator(*parts)).item())
