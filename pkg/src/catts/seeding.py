"""Deterministic seed derivation and counter-based uniform draws.

Everything here is pure integer arithmetic (splitmix64 mixing, sha256 for
string material), so seeded behavior is identical across platforms and runs.
"""

from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a mixed tuple of ints and strings."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") >> 1


def unit_uniform(seed: int, index: int = 0) -> float:
    """The index-th uniform draw in (0, 1) of the stream for ``seed``."""
    word = mix64((seed + (index + 1) * GOLDEN) & MASK64)
    return ((word >> 11) + 0.5) / (1 << 53)
