"""Deterministic, order-insensitive random streams.

Every stochastic component draws from a stream keyed by a tuple of labels and
integers (for example ``("trial", 3, "corrupt")``).  Keys are hashed with
SHA-256 into a Philox counter-based generator, so a stream depends only on its
key, never on how many draws other streams have consumed.  This is what makes
trials replayable individually and safe to evaluate in any order.
"""
from __future__ import annotations

import hashlib

import numpy as np

Key = int | str | bytes


def _digest(keys: tuple[Key, ...]) -> bytes:
    h = hashlib.sha256()
    for k in keys:
        if isinstance(k, bool):
            raise TypeError("bool keys are ambiguous; use int or str")
        if isinstance(k, (int, np.integer)):
            h.update(b"i")
            h.update(int(k).to_bytes(16, "little", signed=True))
        elif isinstance(k, str):
            h.update(b"s")
            h.update(k.encode("utf-8"))
        elif isinstance(k, bytes):
            h.update(b"b")
            h.update(k)
        else:
            raise TypeError(f"unsupported stream key type: {type(k)!r}")
        h.update(b"\x00")
    return h.digest()


def stream(*keys: Key) -> np.random.Generator:
    """Return an independent generator for the given key tuple.

    Identical keys always yield an identical stream; distinct keys yield
    streams that are independent for practical purposes.
    """
    if not keys:
        raise ValueError("stream requires at least one key")
    d = _digest(keys)
    key = np.frombuffer(d[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
