"""Image-caption corpus manifests in three bit-exact text formats.

Formats:
  tsv2   image_ref<TAB>caption            (id derived from content)
  tsv3   id<TAB>image_ref<TAB>caption
  jsonl  {"id"?, "image_ref", "caption", "source"?}

TSV fields escape TAB, newline, carriage return, and backslash as \\t, \\n,
\\r, \\\\ so files stay parseable line-by-line without a quoting state
machine. TSV files may start with a `# corpus-sieve v1` comment line which
the parser ignores. TSV carries no `source` column; records round-trip
through TSV only when source is empty.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .errors import CorpusSieveError
from .hashing import fnv1a64_hex

FORMATS = ("tsv2", "tsv3", "jsonl")
FORMAT_VERSION = "1"
TSV_HEADER = "# corpus-sieve v1"

_ID_RE = re.compile(r"^[0-9a-f]{16}$")


class ManifestError(CorpusSieveError):
    pass


class MalformedRowError(ManifestError):
    def __init__(self, line_no: int, detail: str) -> None:
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


class DuplicateIdError(ManifestError):
    def __init__(self, pair_id: str, line_no: int | None = None) -> None:
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate pair id {pair_id}{where}")
        self.pair_id = pair_id


class EmptyFieldError(ManifestError):
    def __init__(self, line_no: int, field_name: str) -> None:
        super().__init__(f"line {line_no}: empty {field_name}")
        self.line_no = line_no


def derive_pair_id(image_ref: str, caption: str) -> str:
    """Content id: FNV-1a-64 over image_ref + LF + caption, as 16 hex chars."""
    return fnv1a64_hex(image_ref + "\n" + caption)


@dataclass(frozen=True)
class PairRecord:
    """One image reference plus caption; the unit of filtration."""

    image_ref: str
    caption: str
    id: str = ""
    source: str = ""

    def __post_init__(self) -> None:
        if not self.image_ref:
            raise ValueError("image_ref must be non-empty")
        if not self.caption.strip():
            raise ValueError("caption must be non-empty after trimming")
        if not self.id:
            object.__setattr__(self, "id", derive_pair_id(self.image_ref, self.caption))
        elif not _ID_RE.match(self.id):
            raise ValueError(f"id must be 16 lowercase hex chars, got {self.id!r}")


@dataclass(frozen=True)
class Manifest:
    """Ordered collection of pair records with unique ids."""

    records: tuple[PairRecord, ...] = ()
    format_version: str = FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateIdError(rec.id)
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def by_id(self) -> dict[str, PairRecord]:
        return {rec.id: rec for rec in self.records}


_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape_tsv_field(value: str) -> str:
    out = []
    for ch in value:
        out.append(_ESCAPES.get(ch, ch))
    return "".join(out)


def unescape_tsv_field(value: str, line_no: int) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\":
            if i + 1 >= len(value):
                raise MalformedRowError(line_no, "dangling backslash escape")
            nxt = value[i + 1]
            if nxt not in _UNESCAPES:
                raise MalformedRowError(line_no, f"unknown escape \\{nxt}")
            out.append(_UNESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _record_from_fields(
    line_no: int, image_ref: str, caption: str, pair_id: str = "", source: str = ""
) -> PairRecord:
    if not image_ref:
        raise EmptyFieldError(line_no, "image_ref")
    if not caption.strip():
        raise EmptyFieldError(line_no, "caption")
    if pair_id and not _ID_RE.match(pair_id):
        raise MalformedRowError(line_no, f"invalid id hex {pair_id!r}")
    return PairRecord(image_ref=image_ref, caption=caption, id=pair_id, source=source)


def parse_manifest(stream: str | bytes, fmt: str) -> Manifest:
    """Parse a UTF-8 stream into a Manifest; blank lines are skipped."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown manifest format {fmt!r}")
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")

    records: list[PairRecord] = []
    seen: set[str] = set()
    for line_no, raw_line in enumerate(stream.split("\n"), start=1):
        line = raw_line[:-1] if raw_line.endswith("\r") else raw_line
        if not line.strip():
            continue
        if fmt != "jsonl" and line_no == 1 and line.startswith("# corpus-sieve"):
            continue
        if fmt == "jsonl":
            rec = _parse_jsonl_row(line, line_no)
        else:
            rec = _parse_tsv_row(line, line_no, fmt)
        if rec.id in seen:
            raise DuplicateIdError(rec.id, line_no)
        seen.add(rec.id)
        records.append(rec)
    return Manifest(records=tuple(records))


def _parse_tsv_row(line: str, line_no: int, fmt: str) -> PairRecord:
    fields = line.split("\t")
    expected = 2 if fmt == "tsv2" else 3
    if len(fields) != expected:
        raise MalformedRowError(line_no, f"expected {expected} fields, got {len(fields)}")
    fields = [unescape_tsv_field(f, line_no) for f in fields]
    if fmt == "tsv2":
        return _record_from_fields(line_no, fields[0], fields[1])
    return _record_from_fields(line_no, fields[1], fields[2], pair_id=fields[0])


def _parse_jsonl_row(line: str, line_no: int) -> PairRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRowError(line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MalformedRowError(line_no, "row is not a JSON object")
    image_ref = obj.get("image_ref")
    caption = obj.get("caption")
    if not isinstance(image_ref, str) or not isinstance(caption, str):
        raise MalformedRowError(line_no, "image_ref and caption must be strings")
    pair_id = obj.get("id", "")
    source = obj.get("source", "")
    if not isinstance(pair_id, str) or not isinstance(source, str):
        raise MalformedRowError(line_no, "id and source must be strings when present")
    return _record_from_fields(line_no, image_ref, caption, pair_id=pair_id, source=source)


def write_manifest(manifest: Manifest, fmt: str, include_header: bool = False) -> str:
    """Serialize a manifest; parse_manifest(write_manifest(m, f), f) == m."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown manifest format {fmt!r}")
    lines: list[str] = []
    if include_header and fmt != "jsonl" and manifest.records:
        lines.append(TSV_HEADER)
    for rec in manifest.records:
        if fmt == "tsv2":
            lines.append(f"{escape_tsv_field(rec.image_ref)}\t{escape_tsv_field(rec.caption)}")
        elif fmt == "tsv3":
            lines.append(
                f"{rec.id}\t{escape_tsv_field(rec.image_ref)}\t{escape_tsv_field(rec.caption)}"
            )
        else:
            obj: dict[str, str] = {"id": rec.id, "image_ref": rec.image_ref, "caption": rec.caption}
            if rec.source:
                obj["source"] = rec.source
            lines.append(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
    if not lines:
        return ""
    return "\n".join(lines) + "\n"


def dedupe(manifest: Manifest, exclude_ids: Iterable[str] | None = None) -> Manifest:
    """Keep the first occurrence of each id; drop members of exclude_ids."""
    excluded = set(exclude_ids) if exclude_ids is not None else set()
    seen: set[str] = set()
    kept: list[PairRecord] = []
    for rec in manifest.records:
        if rec.id in seen or rec.id in excluded:
            continue
        seen.add(rec.id)
        kept.append(rec)
    return replace(manifest, records=tuple(kept))


def concat(*manifests: Manifest) -> Manifest:
    """Concatenate manifests, deduplicating by first occurrence."""
    records: list[PairRecord] = []
    seen: set[str] = set()
    for m in manifests:
        for rec in m.records:
            if rec.id not in seen:
                seen.add(rec.id)
                records.append(rec)
    return Manifest(records=tuple(records))


def manifest_digest(manifest: Manifest) -> str:
    """Content digest over the canonical tsv3 serialization (provenance key)."""
    return fnv1a64_hex(write_manifest(manifest, "tsv3"))


def infer_format(path: str | Path, first_line: str | None = None) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".jsonl":
        return "jsonl"
    if suffix == ".tsv2":
        return "tsv2"
    if suffix == ".tsv3":
        return "tsv3"
    if suffix == ".tsv":
        if first_line is None or first_line.startswith("# corpus-sieve") or not first_line.strip():
            return "tsv3"
        return "tsv2" if first_line.count("\t") == 1 else "tsv3"
    raise ValueError(f"cannot infer manifest format from {path}")


def read_manifest_file(path: str | Path, fmt: str | None = None) -> Manifest:
    with open(path, encoding="utf-8", newline="") as handle:
        text = handle.read()
    if fmt is None:
        first = ""
        for line in text.split("\n"):
            if line.strip() and not line.startswith("# corpus-sieve"):
                first = line
                break
        fmt = infer_format(path, first)
    return parse_manifest(text, fmt)


def write_manifest_file(
    path: str | Path, manifest: Manifest, fmt: str | None = None, include_header: bool = True
) -> None:
    if fmt is None:
        fmt = infer_format(path)
    Path(path).write_text(
        write_manifest(manifest, fmt, include_header=include_header), encoding="utf-8", newline=""
    )
