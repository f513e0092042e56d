"""HTTP service for the manual review loop.

JSON API over the annotation store plus static serving for the review UI
bundle. Writes serialize through the store's single-writer journal; reads
come from the in-memory index. Images are never proxied; the UI loads
image_ref directly.
"""
from __future__ import annotations

import json
import logging
import mimetypes
import re
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .annotations import (
    AlreadyReviewedError,
    Annotation,
    AnnotationStore,
    PairNotFoundError,
    REVIEW_STATES,
)
from .manifest import Manifest, PairRecord

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 50

_REVIEW_PATH_RE = re.compile(r"^/api/pairs/([0-9a-f]{16})/review$")
_PAIR_PATH_RE = re.compile(r"^/api/pairs/([0-9a-f]{16})$")


def _pair_obj(rec: PairRecord) -> dict:
    return {
        "id": rec.id,
        "image_ref": rec.image_ref,
        "caption": rec.caption,
        "source": rec.source,
    }


def _annotation_obj(ann: Annotation | None) -> dict | None:
    return None if ann is None else ann.to_obj()


class ReviewServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(
        self,
        address: tuple[str, int],
        store: AnnotationStore,
        manifest: Manifest,
        static_dir: str | Path | None = None,
    ) -> None:
        super().__init__(address, ReviewHandler)
        self.store = store
        self.manifest = manifest
        self.pairs_by_id = manifest.by_id()
        self.static_dir = Path(static_dir).resolve() if static_dir else None


class ReviewHandler(BaseHTTPRequestHandler):
    server: ReviewServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, obj) -> None:
        body = json.dumps(obj, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("content-type", "application/json; charset=utf-8")
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, code: str, detail: str = "") -> None:
        self._send_json(status, {"error": code, "detail": detail})

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        path, _, query = self.path.partition("?")
        if path == "/api/queue":
            self._handle_queue(query)
        elif path == "/api/stats":
            self._send_json(200, self.server.store.counts())
        elif _PAIR_PATH_RE.match(path):
            self._handle_pair(_PAIR_PATH_RE.match(path).group(1))
        elif path.startswith("/api/"):
            self._send_error_json(404, "NotFound", f"no route {path}")
        else:
            self._handle_static(path)

    def do_POST(self) -> None:  # noqa: N802
        path = self.path.partition("?")[0]
        match = _REVIEW_PATH_RE.match(path)
        if not match:
            self._send_error_json(404, "NotFound", f"no route {path}")
            return
        self._handle_review(match.group(1))

    def _parse_query(self, query: str) -> dict[str, str]:
        out: dict[str, str] = {}
        for part in query.split("&"):
            if "=" in part:
                key, _, value = part.partition("=")
                out[key] = value
        return out

    def _handle_queue(self, query: str) -> None:
        params = self._parse_query(query)
        state = params.get("state", "pending")
        if state not in REVIEW_STATES:
            self._send_error_json(400, "BadRequest", f"unknown state {state!r}")
            return
        try:
            limit = int(params.get("limit", str(DEFAULT_QUEUE_LIMIT)))
        except ValueError:
            self._send_error_json(400, "BadRequest", "limit must be an integer")
            return
        if limit < 1:
            self._send_error_json(400, "BadRequest", "limit must be positive")
            return
        items = []
        for rec in self.server.manifest.records:
            ann = self.server.store.get(rec.id)
            if ann is None or ann.review_state != state:
                continue
            items.append({"pair": _pair_obj(rec), "annotation": ann.to_obj()})
            if len(items) >= limit:
                break
        self._send_json(200, items)

    def _handle_pair(self, pair_id: str) -> None:
        rec = self.server.pairs_by_id.get(pair_id)
        if rec is None:
            self._send_error_json(404, "NotFound", f"pair {pair_id} not in manifest")
            return
        ann = self.server.store.get(pair_id)
        self._send_json(200, {"pair": _pair_obj(rec), "annotation": _annotation_obj(ann)})

    def _read_body(self) -> dict | None:
        try:
            length = int(self.headers.get("content-length", "0"))
            raw = self.rfile.read(length) if length else b""
            obj = json.loads(raw.decode("utf-8")) if raw else {}
        except (ValueError, json.JSONDecodeError):
            return None
        return obj if isinstance(obj, dict) else None

    def _handle_review(self, pair_id: str) -> None:
        body = self._read_body()
        if body is None:
            self._send_error_json(400, "BadRequest", "body must be a JSON object")
            return
        decision = body.get("decision")
        if decision not in ("accept", "override"):
            self._send_error_json(400, "BadRequest", "decision must be accept or override")
            return
        kwargs = {"reviewer": body.get("reviewer")}
        if decision == "override":
            score = body.get("score")
            if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 10:
                self._send_error_json(400, "BadRequest", "override score must be an int in [1, 10]")
                return
            rationale = body.get("rationale", "")
            if not isinstance(rationale, str):
                self._send_error_json(400, "BadRequest", "rationale must be a string")
                return
            kwargs.update(score=score, rationale=rationale)
        try:
            updated = self.server.store.review(pair_id, decision, **kwargs)
        except PairNotFoundError as exc:
            self._send_error_json(404, "NotFound", str(exc))
            return
        except AlreadyReviewedError as exc:
            self._send_error_json(409, "AlreadyReviewed", str(exc))
            return
        rec = self.server.pairs_by_id.get(pair_id)
        self._send_json(
            200,
            {"pair": _pair_obj(rec) if rec else None, "annotation": updated.to_obj()},
        )

    def _handle_static(self, path: str) -> None:
        root = self.server.static_dir
        if root is None:
            self._send_error_json(404, "NotFound", "no static bundle configured")
            return
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if root not in target.parents and target != root:
            self._send_error_json(404, "NotFound", "path outside static root")
            return
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            self._send_error_json(404, "NotFound", f"no file {rel}")
            return
        content_type = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("content-type", content_type)
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_review_server(
    store: AnnotationStore,
    manifest: Manifest,
    *,
    host: str = "127.0.0.1",
    port: int = 0,
    static_dir: str | Path | None = None,
) -> ReviewServer:
    return ReviewServer((host, port), store, manifest, static_dir=static_dir)
