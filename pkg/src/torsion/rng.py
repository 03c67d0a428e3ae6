"""Keyed random streams.

Every random number is addressed by ``(seed, stream, member, component)``:
the ``(stream, member)`` pair selects an independent Philox stream spawned
from ``seed``, and ``component`` indexes a fixed position inside it. Draws
therefore never depend on evaluation order or on how members are split
across workers.

Standard normals use the cosine branch of Box-Muller on uniforms
``2 * component`` and ``2 * component + 1`` of the member's stream:
``z = sqrt(-2 log(1 - u1)) * cos(2 pi u2)``.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["DATA_NOISE", "ENSEMBLE_NOISE", "PRIOR", "default_seed", "uniforms", "normals"]

# stream identifiers
DATA_NOISE = 0
ENSEMBLE_NOISE = 1
PRIOR = 2

SEED_ENV = "TORSION_SEED"


def default_seed(fallback: int = 0) -> int:
    """Seed from ``$TORSION_SEED`` if set, else ``fallback``."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        return _check_seed(int(raw))
    except ValueError as exc:
        raise ValueError(f"{SEED_ENV}={raw!r} is not a non-negative integer") from exc


def _check_seed(seed) -> int:
    if int(seed) != seed or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def _stream(seed: int, stream: int, member: int) -> np.random.Generator:
    ss = np.random.SeedSequence(_check_seed(seed), spawn_key=(int(stream), int(member)))
    return np.random.Generator(np.random.Philox(ss))


def uniforms(seed: int, stream: int, members: int, count: int) -> np.ndarray:
    """``(members, count)`` uniforms on ``[0, 1)``; row ``j`` comes from member ``j``'s stream."""
    out = np.empty((members, count))
    for j in range(members):
        out[j] = _stream(seed, stream, j).random(count)
    return out


def normals(seed: int, stream: int, members: int, count: int) -> np.ndarray:
    """``(members, count)`` standard normals, entry ``[j, i]`` keyed by ``(seed, stream, j, i)``."""
    u = uniforms(seed, stream, members, 2 * count)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0::2]))
    return radius * np.cos(2.0 * np.pi * u[:, 1::2])
