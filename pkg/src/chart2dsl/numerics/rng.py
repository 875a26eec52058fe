"""Named, counter-based random streams.

Each stream is a Philox generator keyed by a hash of ``(seed, *names)``, so
adding a new consumer never shifts the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    tag = "/".join(str(n) for n in (seed, *names)).encode()
    digest = hashlib.sha256(tag).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def child_seed(seed: int, *names: str | int) -> int:
    """A derived integer seed, for handing to code that builds its own streams."""
    tag = "/".join(str(n) for n in (seed, *names)).encode()
    return int.from_bytes(hashlib.sha256(tag).digest()[:4], "little")
