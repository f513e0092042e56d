"""FNV-1a 64-bit hashing and the splitmix64 generator.

All deterministic behavior in the package (pair ids, mock scores, random
splits, mock embeddings, response-cache keys) bottoms out in these two
primitives, so results reproduce bit-for-bit across platforms and languages.
"""
from __future__ import annotations

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes | str) -> int:
    """FNV-1a 64-bit hash of bytes (strings are hashed as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def fnv1a64_hex(data: bytes | str) -> str:
    """FNV-1a 64-bit hash as 16 lowercase hex characters."""
    return format(fnv1a64(data), "016x")


class SplitMix64:
    """splitmix64: a tiny, portable 64-bit pseudo-random generator."""

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        """Float in [0, 1) built from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_signed_unit(self) -> float:
        """Float in [-1, 1) built from the top 53 bits of one draw."""
        return 2.0 * self.next_unit() - 1.0
