"""Named random streams derived from a single 64-bit seed.

Each consumer asks for its own stream by name ("batch", "dropout", "init",
"synth", "seeds", ...). Streams are derived with ``SeedSequence`` so adding a
new consumer never perturbs the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("batch", "dropout", "init", "synth", "seeds")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a generator for stream ``name`` under ``seed``.

    ``extra`` integers (epoch, step, head index...) select independent
    sub-streams, e.g. ``stream(seed, "dropout", step)``.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = (_name_key(name), *(int(e) for e in extra))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def child_seed(seed: int, name: str, *extra: int) -> int:
    """Derive a 64-bit integer seed for code that wants a plain int."""
    return int(stream(seed, name, *extra).integers(0, 2**63))
