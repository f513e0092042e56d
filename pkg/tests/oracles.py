"""Independent reference implementations used as test oracles.

These are deliberately separate from the package code paths they check:
FNV-1a and splitmix64 are transcribed directly from their published
definitions, the t-distribution tail is integrated numerically with mpmath,
and the Wilson interval is evaluated from the closed form.
"""
from __future__ import annotations

import math

import mpmath

MASK64 = (1 << 64) - 1


def fnv1a64_ref(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64_ref(seed: int, count: int) -> list[int]:
    state = seed & MASK64
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def partial_fisher_yates_ref(ids: list[str], n: int, seed: int) -> list[str]:
    pool = sorted(ids)
    draws = splitmix64_ref(seed, n)
    for i in range(n):
        j = i + draws[i] % (len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n]


def t_tail_quadrature(t: float, df: float, dps: int = 30) -> float:
    """P(T > t) by numerical quadrature of the t density."""
    with mpmath.workdps(dps):
        dfm = mpmath.mpf(df)
        norm = mpmath.gamma((dfm + 1) / 2) / (
            mpmath.sqrt(dfm * mpmath.pi) * mpmath.gamma(dfm / 2)
        )

        def density(u):
            return norm * (1 + u * u / dfm) ** (-(dfm + 1) / 2)

        return float(mpmath.quad(density, [t, mpmath.inf]))


def wilson_ref(wins: int, total: int, z: float = 1.96) -> tuple[float, float]:
    p_hat = wins / total
    denom = 1 + z * z / total
    center = p_hat + z * z / (2 * total)
    half = z * math.sqrt(p_hat * (1 - p_hat) / total + z * z / (4 * total * total))
    return (center - half) / denom, (center + half) / denom


def unit_vector_ref(seed_text: str, dim: int) -> list[float]:
    draws = splitmix64_ref(fnv1a64_ref(seed_text.encode("utf-8")), dim)
    values = [2.0 * ((d >> 11) * 2.0**-53) - 1.0 for d in draws]
    norm = math.sqrt(math.fsum(x * x for x in values))
    return [x / norm for x in values]


def coupled_caption_vector_ref(image_ref: str, caption: str, quality: int, dim: int) -> list[float]:
    image_vec = unit_vector_ref(image_ref, dim)
    if quality == 10:
        return image_vec
    alpha = quality / 10.0
    caption_vec = unit_vector_ref(caption, dim)
    mixed = [alpha * a + (1 - alpha) * b for a, b in zip(image_vec, caption_vec)]
    norm = math.sqrt(math.fsum(x * x for x in mixed))
    return [x / norm for x in mixed]


def cosine_ref(u: list[float], v: list[float]) -> float:
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return dot / (nu * nv)
