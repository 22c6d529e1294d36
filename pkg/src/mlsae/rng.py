"""String-keyed random stream derivation.

Every random draw in the package comes from a generator obtained with
:func:`stream`. A stream is identified by the master seed and a path of
keys, e.g. ``stream(seed, "mc", 17, "population")``. The path is joined
with ``/``, hashed with BLAKE2b to a 128-bit integer, and fed together with
the master seed into :class:`numpy.random.SeedSequence`. Streams therefore
depend only on (seed, path), never on call order or on which worker process
evaluates them, which is what makes parallel runs bit-identical to serial
ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def path_key(*keys) -> int:
    """Hash a key path to a non-negative 128-bit integer."""
    text = "/".join(str(k) for k in keys)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest(), "little")


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence([int(seed), path_key(*keys)])


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream ``seed / keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def child_seed(seed: int, *keys) -> int:
    """Derive a plain 63-bit integer seed, for APIs that take an int."""
    return int(seed_sequence(seed, *keys).generate_state(2, np.uint64)[0] >> np.uint64(1))
