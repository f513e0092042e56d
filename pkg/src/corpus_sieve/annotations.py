"""Append-only annotation journal with latest-wins replay and SFT export.

The journal is one JSON object per line, UTF-8, LF-terminated. Appends are
flushed and fsynced so a crash can lose at most the line being written; a
truncated final line is discarded on reload and earlier records stay intact.
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from .errors import CorpusSieveError
from .manifest import Manifest

PENDING = "pending"
ACCEPTED = "accepted"
OVERRIDDEN = "overridden"
REVIEW_STATES = (PENDING, ACCEPTED, OVERRIDDEN)

SFT_HYPERPARAMS_HINT = {"lr": 2e-6, "batch_size": 128, "epochs": 1, "scheduler": "cosine"}

_ANNOTATION_KEYS = (
    "pair_id",
    "score",
    "rationale",
    "annotator",
    "review_state",
    "override_score",
    "override_rationale",
    "reviewer",
    "ts",
)


class AnnotationError(CorpusSieveError):
    pass


class PairNotFoundError(AnnotationError):
    def __init__(self, pair_id: str) -> None:
        super().__init__(f"no annotation for pair {pair_id}")
        self.pair_id = pair_id


class AlreadyReviewedError(AnnotationError):
    def __init__(self, pair_id: str, state: str) -> None:
        super().__init__(f"pair {pair_id} already reviewed ({state})")
        self.pair_id = pair_id


class CorruptJournalError(AnnotationError):
    def __init__(self, line_no: int, detail: str) -> None:
        super().__init__(f"journal line {line_no}: {detail}")
        self.line_no = line_no


class EmptyExportError(AnnotationError):
    pass


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Annotation:
    """One scoring event for a pair, including its review outcome."""

    pair_id: str
    score: int
    rationale: str
    annotator: str
    review_state: str = PENDING
    override_score: int | None = None
    override_rationale: str | None = None
    reviewer: str | None = None
    ts: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.score <= 10:
            raise ValueError(f"score {self.score} outside [1, 10]")
        if self.review_state not in REVIEW_STATES:
            raise ValueError(f"unknown review state {self.review_state!r}")
        overridden = self.review_state == OVERRIDDEN
        if overridden != (self.override_score is not None):
            raise ValueError("override_score present iff review_state is overridden")
        if self.override_score is not None and not 1 <= self.override_score <= 10:
            raise ValueError(f"override score {self.override_score} outside [1, 10]")
        if not overridden and self.override_rationale is not None:
            raise ValueError("override_rationale present iff review_state is overridden")

    @property
    def effective_score(self) -> int:
        return self.override_score if self.review_state == OVERRIDDEN else self.score

    @property
    def effective_rationale(self) -> str:
        if self.review_state == OVERRIDDEN and self.override_rationale is not None:
            return self.override_rationale
        return self.rationale

    def to_obj(self) -> dict:
        return {key: getattr(self, key) for key in _ANNOTATION_KEYS}

    @classmethod
    def from_obj(cls, obj: dict) -> "Annotation":
        return cls(
            pair_id=obj["pair_id"],
            score=obj["score"],
            rationale=obj.get("rationale", ""),
            annotator=obj.get("annotator", ""),
            review_state=obj.get("review_state", PENDING),
            override_score=obj.get("override_score"),
            override_rationale=obj.get("override_rationale"),
            reviewer=obj.get("reviewer"),
            ts=obj.get("ts", ""),
        )


def annotation_json(a: Annotation) -> str:
    return json.dumps(a.to_obj(), ensure_ascii=False, separators=(",", ":"), sort_keys=True)


class AnnotationStore:
    """Journal-backed store: single writer, latest annotation wins per pair."""

    def __init__(
        self,
        path: str | Path,
        *,
        now: Callable[[], str] = utc_now_iso,
    ) -> None:
        self.path = Path(path)
        self._now = now
        self._lock = threading.Lock()
        self._handle = None
        self._index: dict[str, Annotation] = {}
        self.discarded_trailing = 0
        if self.path.exists():
            self._replay()

    def _replay(self) -> None:
        with open(self.path, encoding="utf-8", newline="") as handle:
            text = handle.read()
        lines = text.split("\n")
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ann = Annotation.from_obj(obj)
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                is_last_content = all(not later.strip() for later in lines[line_no:])
                if is_last_content:
                    self.discarded_trailing += 1
                    return
                raise CorruptJournalError(line_no, str(exc)) from exc
            self._index[ann.pair_id] = ann

    def _ensure_handle(self):
        if self._handle is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "a", encoding="utf-8", newline="")
        return self._handle

    def append(self, annotation: Annotation) -> None:
        if not annotation.ts:
            annotation = replace(annotation, ts=self._now())
        line = annotation_json(annotation)
        with self._lock:
            handle = self._ensure_handle()
            handle.write(line + "\n")
            handle.flush()
            os.fsync(handle.fileno())
            self._index[annotation.pair_id] = annotation

    def get(self, pair_id: str) -> Annotation | None:
        return self._index.get(pair_id)

    def all(self) -> dict[str, Annotation]:
        return dict(self._index)

    def __len__(self) -> int:
        return len(self._index)

    def pair_ids(self) -> list[str]:
        return list(self._index)

    def effective_scores(self) -> dict[str, int]:
        return {pid: ann.effective_score for pid, ann in self._index.items()}

    def counts(self) -> dict[str, int]:
        out = {state: 0 for state in REVIEW_STATES}
        for ann in self._index.values():
            out[ann.review_state] += 1
        out["total"] = len(self._index)
        return out

    def review(
        self,
        pair_id: str,
        decision: str,
        *,
        score: int | None = None,
        rationale: str | None = None,
        reviewer: str | None = None,
    ) -> Annotation:
        """Record an accept or override decision as a new journal record."""
        current = self.get(pair_id)
        if current is None:
            raise PairNotFoundError(pair_id)
        if current.review_state != PENDING:
            raise AlreadyReviewedError(pair_id, current.review_state)
        if decision == "accept":
            updated = replace(current, review_state=ACCEPTED, reviewer=reviewer, ts=self._now())
        elif decision == "override":
            if score is None or not 1 <= int(score) <= 10:
                raise ValueError(f"override score must be in [1, 10], got {score!r}")
            updated = replace(
                current,
                review_state=OVERRIDDEN,
                override_score=int(score),
                override_rationale=rationale if rationale is not None else "",
                reviewer=reviewer,
                ts=self._now(),
            )
        else:
            raise ValueError(f"unknown review decision {decision!r}")
        self.append(updated)
        return updated

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.flush()
                os.fsync(self._handle.fileno())
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "AnnotationStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass(frozen=True)
class ExportSummary:
    exported: int
    pending: int
    missing: int


def export_sft(
    store: AnnotationStore,
    manifest: Manifest,
    out_path: str | Path,
    *,
    hyperparams: dict | None = None,
) -> ExportSummary:
    """Write the reviewed pairs as SFT training lines; pending pairs stay out."""
    hyperparams = dict(SFT_HYPERPARAMS_HINT if hyperparams is None else hyperparams)
    exported = pending = missing = 0
    lines: list[str] = []
    for rec in manifest.records:
        ann = store.get(rec.id)
        if ann is None:
            missing += 1
            continue
        if ann.review_state == PENDING:
            pending += 1
            continue
        obj = {
            "image_ref": rec.image_ref,
            "caption": rec.caption,
            "score": ann.effective_score,
            "rationale": ann.effective_rationale,
            "meta": {"teacher": ann.annotator, "hyperparams_hint": hyperparams},
        }
        lines.append(json.dumps(obj, ensure_ascii=False, separators=(",", ":"), sort_keys=True))
        exported += 1
    if exported == 0:
        raise EmptyExportError("no accepted or overridden annotations to export")
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
    return ExportSummary(exported=exported, pending=pending, missing=missing)


def replay_journal(path: str | Path) -> dict[str, Annotation]:
    """Rebuild the latest-wins index from a journal file."""
    return AnnotationStore(path).all()
