"""Deterministic seed derivation.

Every source of randomness in the package is a ``numpy.random.Generator``
seeded through :func:`derive_seed`.  The derivation is a stable, documented
hash so that results are bitwise reproducible across runs, platforms and
worker counts:

    seed = first 8 bytes (little-endian) of
           SHA-256( b"gibbscal-seed-v1"
                    || uint64le(root)
                    || for each (label, index): uint32le(len(label)) || label
                                                || int64le(index) )

Worker pools only change *where* a unit of work executes, never which seed
it receives.
"""

from __future__ import annotations

import hashlib
import struct

_MASK64 = (1 << 64) - 1
_PREFIX = b"gibbscal-seed-v1"


def derive_seed(root: int, *path: tuple[str, int]) -> int:
    """Derive a 64-bit sub-seed from a root seed and a labelled index path.

    Parameters
    ----------
    root : int
        Root seed (any Python int; reduced mod 2**64).
    *path : (label, index) pairs
        E.g. ``("rep", 3), ("boot", 17), ("chain", 0)``.
    """
    h = hashlib.sha256()
    h.update(_PREFIX)
    h.update(struct.pack("<Q", root & _MASK64))
    for label, index in path:
        lab = label.encode("utf-8")
        h.update(struct.pack("<I", len(lab)))
        h.update(lab)
        h.update(struct.pack("<q", int(index)))
    return int.from_bytes(h.digest()[:8], "little")
