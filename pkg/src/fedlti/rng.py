"""Named random substreams derived from a master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"substream keys must be non-negative, got {part}")
    return int(part)


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``.

    The same key path always yields the same stream, regardless of how many
    other streams were drawn before it. This keeps client-level and
    trial-level randomness stable under reordering or parallel execution.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(ss)
