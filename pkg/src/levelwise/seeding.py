"""Deterministic named RNG sub-streams.

All randomness in a run flows from one root seed. Components draw from
named sub-streams (``init``, ``dropout``, ``data-order``, ...) so that any
single component is replayable without consuming another's stream. The
mapping (root_seed, name) -> stream is stable across processes and
platforms (no reliance on Python's randomized string hashing).
"""

import hashlib

import numpy as np


def substream(root_seed, name):
    """A fresh Generator for the (root_seed, name) sub-stream."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype=np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def substream_seed(root_seed, name):
    """A derived integer seed for handing to an independent job."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
