"""Named random substreams derived from a single 64-bit seed.

A stream is addressed by a path such as ``("mix.input", epoch, batch)``.
The same path always yields the same generator, regardless of how many
other streams were created before it, so draws do not depend on call
order or thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"substream index must be non-negative, got {part}")
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *path) -> np.random.Generator:
    seed = int(seed)
    if not 0 <= seed <= SEED_MASK:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
