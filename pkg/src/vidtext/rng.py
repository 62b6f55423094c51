"""Counter-based random streams.

A stream is identified by ``(run_seed, stream_name, index)`` and backed by a
Philox generator keyed from a hash of that triple, so independent consumers
(data order, initialisation, shuffles) never perturb each other and any stream
can be rebuilt from its identity alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return a fresh generator for the stream ``(seed, name, index)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, index)))
