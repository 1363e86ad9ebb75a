"""Deterministic random streams.

Every stochastic operation in the package draws from a named stream:
a Philox (counter-based) generator keyed by a hash of the run seed plus
a sequence of labels. Streams are independent of each other and of call
order, which keeps full runs reproducible and makes training resumable
without serializing generator state.
"""

import hashlib

import numpy as np


def stream_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by (seed, *labels).

    Labels may be ints or strings. The same (seed, labels) always yields
    the same sequence, on any platform.
    """
    tag = repr((int(seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.blake2b(tag, digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def stream_uniform(seed: int, *labels) -> float:
    """Single uniform draw in [0, 1) from the named stream."""
    return float(stream_rng(seed, *labels).random())


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit sub-seed for the given labels."""
    tag = repr((int(seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.blake2b(tag, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
