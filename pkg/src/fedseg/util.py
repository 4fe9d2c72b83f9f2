"""Seed derivation and content hashing helpers shared across the package."""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from a sequence of labels.

    Uses SHA-256 rather than Python's hash() so the value is identical
    across processes and platforms.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def hash_images(images) -> str:
    """Content hash of an image collection (shapes + raw bytes)."""
    h = hashlib.sha256()
    for img in images:
        arr = np.ascontiguousarray(np.asarray(img, dtype=np.float64))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
