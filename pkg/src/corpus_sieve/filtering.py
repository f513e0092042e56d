"""Split construction: threshold filtration, seeded random baseline, buckets.

Random sampling sorts ids lexicographically and then runs a partial
Fisher-Yates shuffle driven by splitmix64, so a given (ids, n, seed) triple
produces the same split on any platform regardless of input file order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import CorpusSieveError
from .hashing import SplitMix64
from .manifest import Manifest, PairRecord, manifest_digest, write_manifest_file

DEFAULT_THRESHOLD = 9
DEFAULT_BUCKET_EDGES = ((1, 3), (4, 6), (7, 8), (9, 10))


class FilterError(CorpusSieveError):
    pass


class SampleTooLargeError(FilterError):
    def __init__(self, n: int, available: int) -> None:
        super().__init__(f"cannot sample {n} ids from {available}")


@dataclass(frozen=True)
class SplitManifest:
    """A named subset of a parent manifest with reproducibility metadata."""

    name: str
    pair_ids: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pair_ids)

    def records(self, parent: Manifest) -> list[PairRecord]:
        by_id = parent.by_id()
        return [by_id[pid] for pid in self.pair_ids]


@dataclass(frozen=True)
class BucketSpec:
    """Ordered inclusive score ranges that jointly cover [1, 10]."""

    edges: tuple[tuple[int, int], ...] = DEFAULT_BUCKET_EDGES

    def __post_init__(self) -> None:
        if not self.edges:
            raise ValueError("bucket spec needs at least one range")
        prev_hi = 0
        for lo, hi in self.edges:
            if lo > hi:
                raise ValueError(f"bucket range {lo}-{hi} is inverted")
            if lo != prev_hi + 1:
                raise ValueError("bucket ranges must be disjoint, ordered, and contiguous")
            prev_hi = hi
        if self.edges[0][0] != 1 or self.edges[-1][1] != 10:
            raise ValueError("bucket ranges must jointly cover [1, 10]")

    def labels(self) -> list[str]:
        return [f"{lo}-{hi}" for lo, hi in self.edges]

    def label_of(self, score: int) -> str:
        for lo, hi in self.edges:
            if lo <= score <= hi:
                return f"{lo}-{hi}"
        raise ValueError(f"score {score} outside [1, 10]")


def parse_bucket_edges(text: str) -> BucketSpec:
    """Parse "1-3,4-6,7-8,9-10" into a BucketSpec."""
    edges = []
    for part in text.split(","):
        lo_s, _, hi_s = part.strip().partition("-")
        edges.append((int(lo_s), int(hi_s)))
    return BucketSpec(edges=tuple(edges))


def _checked_scores(ids: Sequence[str], scores: Mapping[str, int]) -> None:
    for pid in ids:
        score = scores[pid]
        if not 1 <= score <= 10:
            raise ValueError(f"score {score} for pair {pid} outside [1, 10]")


def apply_threshold(
    parent: Manifest,
    scores: Mapping[str, int],
    threshold: int = DEFAULT_THRESHOLD,
    *,
    created_ts: str = "",
) -> SplitManifest:
    """Retain pairs scoring at or above the threshold, in parent order."""
    if not 1 <= threshold <= 10:
        raise ValueError(f"threshold {threshold} outside [1, 10]")
    ids = parent.ids()
    _checked_scores(ids, scores)
    kept = tuple(pid for pid in ids if scores[pid] >= threshold)
    provenance = {
        "parent": manifest_digest(parent),
        "threshold": threshold,
        "created_ts": created_ts,
    }
    return SplitManifest(name="filtered", pair_ids=kept, provenance=provenance)


def sample_random(
    parent: Manifest,
    n: int,
    seed: int,
    *,
    name: str = "random",
    created_ts: str = "",
) -> SplitManifest:
    """Seeded uniform sample of n ids, returned in selection order."""
    pool = sorted(parent.ids())
    if n > len(pool):
        raise SampleTooLargeError(n, len(pool))
    rng = SplitMix64(seed)
    for i in range(n):
        j = i + rng.next_u64() % (len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    provenance = {"parent": manifest_digest(parent), "seed": seed, "created_ts": created_ts}
    return SplitManifest(name=name, pair_ids=tuple(pool[:n]), provenance=provenance)


def bucketize(
    scores: Mapping[str, int], spec: BucketSpec = BucketSpec()
) -> dict[str, list[str]]:
    """Partition scored ids into buckets; every id lands in exactly one."""
    out: dict[str, list[str]] = {label: [] for label in spec.labels()}
    for pid, score in scores.items():
        if not 1 <= score <= 10:
            raise ValueError(f"score {score} for pair {pid} outside [1, 10]")
        out[spec.label_of(score)].append(pid)
    return out


def build_splits(
    parent: Manifest,
    scores: Mapping[str, int],
    threshold: int = DEFAULT_THRESHOLD,
    seed: int = 0,
    *,
    created_ts: str = "",
) -> dict[str, SplitManifest]:
    """The three experimental splits; the random baseline is size-matched."""
    filtered = apply_threshold(parent, scores, threshold, created_ts=created_ts)
    random_split = sample_random(parent, len(filtered), seed, created_ts=created_ts)
    full = SplitManifest(
        name="full",
        pair_ids=tuple(parent.ids()),
        provenance={"parent": manifest_digest(parent), "created_ts": created_ts},
    )
    return {"full": full, "filtered": filtered, "random": random_split}


def write_split_files(split: SplitManifest, parent: Manifest, out_dir: str | Path) -> Path:
    """Write a split as a tsv3 manifest plus a provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / f"{split.name}.tsv"
    write_manifest_file(manifest_path, Manifest(records=tuple(split.records(parent))), fmt="tsv3")
    sidecar = dict(split.provenance)
    sidecar["name"] = split.name
    provenance_path = out_dir / f"{split.name}.provenance.json"
    provenance_path.write_text(
        json.dumps(sidecar, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return manifest_path
