"""Native statistics: cosine alignment, two-sample t-test with incomplete-beta
p-values, corpus perplexity, preference rates with Wilson intervals, bucket
tables, and a deterministic mock embedder for closed-loop tests.

Accumulations use math.fsum so results are exactly rounded and permutation
invariant. Tiny p-values are additionally carried in log10 so reports can
render magnitudes that would underflow a float.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .errors import CorpusSieveError
from .gateway import FILTERED_WINS, FULL_WINS, TIE, map_verdict
from .hashing import SplitMix64, fnv1a64
from .manifest import PairRecord

WILSON_Z = 1.96
MIN_EMBEDDING_DIM = 2

_INC_BETA_TOL = 1e-12
_INC_BETA_MAX_ITER = 500
_LENTZ_TINY = 1e-300


class StatsError(CorpusSieveError):
    pass


class DimensionMismatchError(StatsError):
    pass


class ZeroVectorError(StatsError):
    pass


class InsufficientDataError(StatsError):
    pass


class DegenerateDataError(StatsError):
    pass


class NonConvergenceError(StatsError):
    pass


class EmptyCorpusError(StatsError):
    pass


class PositiveLogprobError(StatsError):
    def __init__(self, item_index: int, value: float) -> None:
        super().__init__(f"caption {item_index} has positive logprob {value}")
        self.item_index = item_index


class EmptyInputError(StatsError):
    pass


class PairEmbeddingError(StatsError):
    """A single pair could not be embedded; callers may exclude and count it."""

    def __init__(self, pair_id: str, detail: str) -> None:
        super().__init__(f"pair {pair_id}: {detail}")
        self.pair_id = pair_id


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine of the angle between u and v with exactly-rounded accumulation."""
    if len(u) != len(v):
        raise DimensionMismatchError(f"dimensions differ: {len(u)} vs {len(v)}")
    dot = math.fsum(x * y for x, y in zip(u, v))
    norm_u = math.sqrt(math.fsum(x * x for x in u))
    norm_v = math.sqrt(math.fsum(y * y for y in v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroVectorError("cosine undefined for zero vectors")
    return dot / (norm_u * norm_v)


class Embedder(Protocol):
    def pair_vectors(self, rec: PairRecord) -> tuple[list[float], list[float]]:
        """Return (image_vector, caption_vector) or raise PairEmbeddingError."""


@dataclass(frozen=True)
class AlignmentResult:
    mean: float | None
    n: int
    values: tuple[tuple[str, float], ...] = ()
    failed: tuple[str, ...] = ()

    def sample(self) -> list[float]:
        return [value for _, value in self.values]


def mean_alignment(records: Sequence[PairRecord], embedder: Embedder) -> AlignmentResult:
    """Mean image-caption cosine over records; per-pair values are retained."""
    values: list[tuple[str, float]] = []
    failed: list[str] = []
    for rec in records:
        try:
            image_vec, caption_vec = embedder.pair_vectors(rec)
        except PairEmbeddingError:
            failed.append(rec.id)
            continue
        values.append((rec.id, cosine_similarity(image_vec, caption_vec)))
    mean = math.fsum(v for _, v in values) / len(values) if values else None
    return AlignmentResult(mean=mean, n=len(values), values=tuple(values), failed=tuple(failed))


def _ln_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_cont_fraction(x: float, a: float, b: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz scheme)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _LENTZ_TINY:
        d = _LENTZ_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _INC_BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _LENTZ_TINY:
            d = _LENTZ_TINY
        c = 1.0 + aa / c
        if abs(c) < _LENTZ_TINY:
            c = _LENTZ_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _LENTZ_TINY:
            d = _LENTZ_TINY
        c = 1.0 + aa / c
        if abs(c) < _LENTZ_TINY:
            c = _LENTZ_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _INC_BETA_TOL:
            return h
    raise NonConvergenceError(
        f"incomplete beta continued fraction did not converge for x={x}, a={a}, b={b}"
    )


def _inc_beta_direct(x: float, a: float, b: float) -> tuple[float, float]:
    """(I_x(a,b), ln I_x(a,b)) for x on the convergent side of the switch."""
    ln_pre = a * math.log(x) + b * math.log1p(-x) - _ln_beta(a, b)
    cf = _beta_cont_fraction(x, a, b)
    ln_value = ln_pre + math.log(cf) - math.log(a)
    return math.exp(ln_pre) * cf / a, ln_value


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) via continued fraction with the symmetry switch."""
    value, _ = _regularized_incomplete_beta_log(x, a, b)
    return value


def _regularized_incomplete_beta_log(x: float, a: float, b: float) -> tuple[float, float]:
    """(I_x(a,b), ln I_x(a,b)); the log stays finite when the value underflows."""
    if a <= 0 or b <= 0:
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    if x < 0.0 or x > 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0, -math.inf
    if x == 1.0:
        return 1.0, 0.0
    if x > (a + 1.0) / (a + b + 2.0):
        tail, _ = _inc_beta_direct(1.0 - x, b, a)
        value = 1.0 - tail
        return value, math.log(value) if value > 0.0 else -math.inf
    return _inc_beta_direct(x, a, b)


def _t_survival(t: float, df: float) -> tuple[float, float]:
    """(P(T > t), log10 P(T > t)) for the t distribution with df dof."""
    if math.isinf(t):
        return (0.0, -math.inf) if t > 0 else (1.0, 0.0)
    x = df / (df + t * t)
    half_ix, ln_half_ix = _regularized_incomplete_beta_log(x, df / 2.0, 0.5)
    if t >= 0:
        p = 0.5 * half_ix
        log10_p = (math.log(0.5) + ln_half_ix) / math.log(10.0)
        return p, log10_p
    p = 1.0 - 0.5 * half_ix
    return p, math.log10(p) if p > 0.0 else -math.inf


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_one_sided: float
    p_two_sided: float
    log10_p_one_sided: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int
    variant: str = "student"


def _mean_var(sample: Sequence[float]) -> tuple[float, float]:
    n = len(sample)
    mean = math.fsum(sample) / n
    var = math.fsum((x - mean) ** 2 for x in sample) / (n - 1)
    return mean, var


def _finish_t(
    t: float, df: float, mean_a: float, mean_b: float, n_a: int, n_b: int, variant: str
) -> TTestResult:
    p_one, log10_p_one = _t_survival(t, df)
    p_two = 2.0 * min(p_one, 1.0 - p_one)
    return TTestResult(
        t=t,
        df=df,
        p_one_sided=p_one,
        p_two_sided=p_two,
        log10_p_one_sided=log10_p_one,
        mean_a=mean_a,
        mean_b=mean_b,
        n_a=n_a,
        n_b=n_b,
        variant=variant,
    )


def students_t_two_sample(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Pooled-variance two-sample t-test, one-sided alternative mean_a > mean_b."""
    n_a, n_b = len(a), len(b)
    if n_a < 2 or n_b < 2:
        raise InsufficientDataError("each sample needs at least 2 observations")
    mean_a, var_a = _mean_var(a)
    mean_b, var_b = _mean_var(b)
    df = n_a + n_b - 2
    pooled = ((n_a - 1) * var_a + (n_b - 1) * var_b) / df
    if pooled == 0.0:
        if mean_a == mean_b:
            raise DegenerateDataError("zero pooled variance with equal means")
        t = math.inf if mean_a > mean_b else -math.inf
        return _finish_t(t, float(df), mean_a, mean_b, n_a, n_b, "student")
    t = (mean_a - mean_b) / math.sqrt(pooled * (1.0 / n_a + 1.0 / n_b))
    return _finish_t(t, float(df), mean_a, mean_b, n_a, n_b, "student")


def welch_t_two_sample(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite df."""
    n_a, n_b = len(a), len(b)
    if n_a < 2 or n_b < 2:
        raise InsufficientDataError("each sample needs at least 2 observations")
    mean_a, var_a = _mean_var(a)
    mean_b, var_b = _mean_var(b)
    se2 = var_a / n_a + var_b / n_b
    if se2 == 0.0:
        if mean_a == mean_b:
            raise DegenerateDataError("zero variance in both samples with equal means")
        t = math.inf if mean_a > mean_b else -math.inf
        return _finish_t(t, float(n_a + n_b - 2), mean_a, mean_b, n_a, n_b, "welch")
    df = se2**2 / (
        (var_a / n_a) ** 2 / (n_a - 1) + (var_b / n_b) ** 2 / (n_b - 1)
    )
    t = (mean_a - mean_b) / math.sqrt(se2)
    return _finish_t(t, df, mean_a, mean_b, n_a, n_b, "welch")


@dataclass(frozen=True)
class PerplexityResult:
    corpus_ppl: float
    mean_caption_ppl: float
    tokens: int
    captions: int


def corpus_perplexity(items: Sequence[Sequence[float]]) -> PerplexityResult:
    """Token-weighted corpus perplexity plus the per-caption mean as a secondary."""
    if not items:
        raise EmptyCorpusError("no captions")
    caption_ppls: list[float] = []
    total = 0.0
    tokens = 0
    all_logprobs: list[float] = []
    for idx, seq in enumerate(items):
        if not seq:
            raise EmptyCorpusError(f"caption {idx} has no tokens")
        for lp in seq:
            if lp > 0.0:
                raise PositiveLogprobError(idx, lp)
        all_logprobs.extend(seq)
        tokens += len(seq)
        caption_ppls.append(math.exp(-math.fsum(seq) / len(seq)))
    total = math.fsum(all_logprobs)
    corpus_ppl = math.exp(-total / tokens)
    mean_caption_ppl = math.fsum(caption_ppls) / len(caption_ppls)
    return PerplexityResult(
        corpus_ppl=corpus_ppl,
        mean_caption_ppl=mean_caption_ppl,
        tokens=tokens,
        captions=len(items),
    )


@dataclass(frozen=True)
class PreferenceResult:
    wins: int
    losses: int
    ties: int
    total: int
    rate: float
    wilson_lo: float
    wilson_hi: float


def wilson_interval(wins: int, total: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clamped to [0, 1]."""
    p_hat = wins / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = p_hat + z2 / (2.0 * total)
    half = z * math.sqrt(p_hat * (1.0 - p_hat) / total + z2 / (4.0 * total * total))
    return max(0.0, (center - half) / denom), min(1.0, (center + half) / denom)


def preference_rate(judgments: Sequence[str]) -> PreferenceResult:
    """Share of filtered wins over all judgments; ties count in the total."""
    if not judgments:
        raise EmptyInputError("no judgments")
    wins = losses = ties = 0
    for outcome in judgments:
        if outcome == FILTERED_WINS:
            wins += 1
        elif outcome == FULL_WINS:
            losses += 1
        elif outcome == TIE:
            ties += 1
        else:
            raise ValueError(f"unknown judgment {outcome!r}")
    total = len(judgments)
    lo, hi = wilson_interval(wins, total)
    return PreferenceResult(
        wins=wins,
        losses=losses,
        ties=ties,
        total=total,
        rate=wins / total,
        wilson_lo=lo,
        wilson_hi=hi,
    )


@dataclass(frozen=True)
class BucketRow:
    label: str
    n: int
    mean_cosine: float | None
    failed: int = 0


def bucket_alignment_table(
    buckets: Mapping[str, Sequence[str]],
    records_by_id: Mapping[str, PairRecord],
    embedder: Embedder,
) -> list[BucketRow]:
    """One row per bucket, in bucket order; empty buckets report a null mean."""
    rows: list[BucketRow] = []
    for label, pair_ids in buckets.items():
        records = [records_by_id[pid] for pid in pair_ids]
        result = mean_alignment(records, embedder)
        rows.append(
            BucketRow(label=label, n=result.n, mean_cosine=result.mean, failed=len(result.failed))
        )
    return rows


def _base_unit_vector(seed_text: str, dim: int) -> list[float]:
    rng = SplitMix64(fnv1a64(seed_text))
    values = [rng.next_signed_unit() for _ in range(dim)]
    norm = math.sqrt(math.fsum(x * x for x in values))
    return [x / norm for x in values]


def _unit(values: Sequence[float]) -> list[float]:
    norm = math.sqrt(math.fsum(x * x for x in values))
    return [x / norm for x in values]


def mock_embed(rec: PairRecord, role: str, quality: int, dim: int = 16) -> list[float]:
    """Deterministic embedding whose image-caption coupling grows with quality.

    The caption vector interpolates toward the image vector with weight
    quality/10, so quality 10 captions embed exactly onto their image.
    """
    if role not in ("image", "caption"):
        raise ValueError(f"role must be image or caption, got {role!r}")
    if not 1 <= quality <= 10:
        raise ValueError(f"quality {quality} outside [1, 10]")
    if dim < MIN_EMBEDDING_DIM:
        raise ValueError(f"dim must be at least {MIN_EMBEDDING_DIM}")
    image_vec = _base_unit_vector(rec.image_ref, dim)
    if role == "image":
        return image_vec
    alpha = quality / 10.0
    if alpha == 1.0:
        return image_vec
    caption_base = _base_unit_vector(rec.caption, dim)
    mixed = [alpha * i + (1.0 - alpha) * c for i, c in zip(image_vec, caption_base)]
    return _unit(mixed)


class MockEmbedder:
    """Quality-coupled deterministic embedder keyed by pair id."""

    def __init__(self, quality_by_id: Mapping[str, int], dim: int = 16) -> None:
        self.quality_by_id = quality_by_id
        self.dim = dim

    def pair_vectors(self, rec: PairRecord) -> tuple[list[float], list[float]]:
        quality = self.quality_by_id.get(rec.id)
        if quality is None:
            raise PairEmbeddingError(rec.id, "no quality score for mock embedding")
        return (
            mock_embed(rec, "image", quality, self.dim),
            mock_embed(rec, "caption", quality, self.dim),
        )


class FileEmbeddings:
    """Embeddings loaded from a JSONL file keyed by pair id."""

    def __init__(self, vectors: Mapping[str, tuple[list[float], list[float]]]) -> None:
        self.vectors = dict(vectors)

    @classmethod
    def load(cls, path: str | Path) -> "FileEmbeddings":
        vectors: dict[str, tuple[list[float], list[float]]] = {}
        for line_no, line in enumerate(
            Path(path).read_text(encoding="utf-8").split("\n"), start=1
        ):
            if not line.strip():
                continue
            obj = json.loads(line)
            pair_id = obj["pair_id"]
            image_vec = [float(x) for x in obj["image_embedding"]]
            caption_vec = [float(x) for x in obj["caption_embedding"]]
            for vec in (image_vec, caption_vec):
                if len(vec) < MIN_EMBEDDING_DIM:
                    raise StatsError(f"line {line_no}: embedding dimension below 2")
                if any(not math.isfinite(x) for x in vec):
                    raise StatsError(f"line {line_no}: non-finite embedding entry")
            vectors[pair_id] = (image_vec, caption_vec)
        return cls(vectors)

    def __contains__(self, pair_id: str) -> bool:
        return pair_id in self.vectors

    def pair_vectors(self, rec: PairRecord) -> tuple[list[float], list[float]]:
        found = self.vectors.get(rec.id)
        if found is None:
            raise PairEmbeddingError(rec.id, "missing from embeddings file")
        return found


def write_embeddings_file(
    path: str | Path, vectors: Mapping[str, tuple[Sequence[float], Sequence[float]]]
) -> None:
    lines = []
    for pair_id, (image_vec, caption_vec) in vectors.items():
        lines.append(
            json.dumps(
                {
                    "pair_id": pair_id,
                    "image_embedding": list(image_vec),
                    "caption_embedding": list(caption_vec),
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_logprobs(path: str | Path) -> dict[str, list[float]]:
    """Load {"pair_id", "token_logprobs"} JSONL into a mapping."""
    out: dict[str, list[float]] = {}
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        obj = json.loads(line)
        out[obj["pair_id"]] = [float(x) for x in obj["token_logprobs"]]
    return out


@dataclass(frozen=True)
class VerdictTally:
    outcomes: tuple[str, ...]
    slot_a_wins: int
    total: int

    @property
    def raw_slot_a_rate(self) -> float:
        return self.slot_a_wins / self.total if self.total else 0.0


def load_verdicts(path: str | Path) -> VerdictTally:
    """Load {"item_id", "verdict", "presentation_order"} JSONL and de-bias it."""
    outcomes: list[str] = []
    slot_a_wins = 0
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        obj = json.loads(line)
        letter = str(obj["verdict"]).strip()
        letter = "tie" if letter.lower() == "tie" else letter.upper()
        order = str(obj["presentation_order"]).strip().upper()
        outcomes.append(map_verdict(letter, order))
        if letter == "A":
            slot_a_wins += 1
    return VerdictTally(outcomes=tuple(outcomes), slot_a_wins=slot_a_wins, total=len(outcomes))
