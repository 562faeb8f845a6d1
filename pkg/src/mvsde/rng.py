"""Counter-based random substreams.

Every stream is addressed by ``(seed, *key)``. The key is hashed into a
``SeedSequence`` spawn key and fed to a Philox generator, so a stream depends
only on its address: never on how many other streams exist, which thread
builds it, or in which order streams are requested.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key integers must be nonnegative")
        return int(part)
    # strings get a stable 32-bit tag; offset keeps them apart from small ints
    return (1 << 40) + zlib.crc32(str(part).encode())


def substream(seed: int, *key) -> np.random.Generator:
    """Return the generator living at address ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key_word(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key) -> int:
    """Deterministic 64-bit child seed, for handing to code that wants an int."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key_word(k) for k in key))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
