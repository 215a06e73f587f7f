import hashlib

import numpy as np


def hash64(data: bytes) -> int:
    """64-bit content hash (blake2b with an 8-byte digest, little-endian)."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def hash64_arrays(*arrays: np.ndarray) -> int:
    """Hash a sequence of arrays; shape and dtype are part of the identity."""
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return int.from_bytes(h.digest(), "little")
