"""Counter-based random streams keyed by structured tuples.

Every random draw in the package comes from a Philox generator keyed by a
tuple such as ("noise", seed, epoch, window_id). Streams are independent
across keys and bit-reproducible across runs and platforms, which is what
makes dataset generation, training, and rollouts replayable.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_bytes(parts: tuple) -> bytes:
    pieces = []
    for p in parts:
        if isinstance(p, (bool, np.bool_)):
            pieces.append(b"b" + (b"1" if p else b"0"))
        elif isinstance(p, (int, np.integer)):
            pieces.append(b"i" + int(p).to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            raw = p.encode()
            pieces.append(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            raise TypeError(f"unsupported key part {p!r}")
    return b"|".join(pieces)


def stream(*key_parts) -> np.random.Generator:
    """A fresh generator for the given key; same key, same stream."""
    digest = hashlib.sha256(_key_bytes(key_parts)).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def normal(shape, *key_parts) -> np.ndarray:
    """float32 standard normals drawn from the keyed stream."""
    return stream(*key_parts).standard_normal(shape, dtype=np.float32)
