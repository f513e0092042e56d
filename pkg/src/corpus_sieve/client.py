"""Endpoint client: wire adapters, bounded-parallel fan-out, retry with
backoff, a sliding-window rate limiter, and a content-addressed response
cache for resumable annotation runs.

Two adapters are built in. "native" POSTs {image_ref, caption, rubric} to
/v1/score and treats the response body as scorer output. "chat" speaks a
chat-completions endpoint (messages array with an image part by URL and a
text part, temperature 0) and extracts the first choice's message content.
A third "mock" adapter answers deterministically without any network.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .annotations import PENDING, Annotation, utc_now_iso
from .errors import CorpusSieveError
from .gateway import (
    PromptPayload,
    Rubric,
    build_score_prompt,
    mock_score,
    parse_scorer_output,
    rubric_to_dict,
)
from .hashing import fnv1a64_hex
from .manifest import PairRecord

ADAPTERS = ("native", "chat", "mock")
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class ClientError(CorpusSieveError):
    pass


class TransportError(ClientError):
    """Connection-level failure before an HTTP status was received."""


class EndpointError(ClientError):
    def __init__(self, detail: str, attempts: int = 1, status: int | None = None) -> None:
        super().__init__(f"{detail} (attempts={attempts})")
        self.attempts = attempts
        self.status = status


@dataclass
class EndpointConfig:
    """Connection and pacing settings for a scorer or embedder endpoint."""

    base_url: str = ""
    adapter: str = "native"
    model_id: str = "scorer"
    auth_token_env: str = ""
    max_parallel: int = 4
    requests_per_second: float = 8.0
    max_retries: int = 3
    retry_backoff_ms: tuple[int, ...] = (250, 500, 1000, 2000)
    cache_dir: str | Path | None = None
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {self.adapter!r}")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be at least 1")
        if self.requests_per_second <= 0:
            raise ValueError("requests_per_second must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        backoff = tuple(self.retry_backoff_ms)
        if any(b < 0 for b in backoff) or list(backoff) != sorted(backoff):
            raise ValueError("retry backoff schedule must be non-decreasing")
        self.retry_backoff_ms = backoff

    def auth_token(self) -> str | None:
        if not self.auth_token_env:
            return None
        return os.environ.get(self.auth_token_env)


@dataclass(frozen=True)
class WireResponse:
    status: int
    text: str


Transport = Callable[[str, dict, dict, float], WireResponse]


def httpx_transport(url: str, headers: dict, body: dict, timeout: float) -> WireResponse:
    try:
        response = httpx.post(url, headers=headers, json=body, timeout=timeout)
    except httpx.HTTPError as exc:
        raise TransportError(str(exc)) from exc
    return WireResponse(status=response.status_code, text=response.text)


class RateLimiter:
    """Sliding-window limiter: at most ceil(rate) requests in any window."""

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        if rate >= 1.0:
            self.window = 1.0
            self.capacity = math.ceil(rate)
        else:
            self.window = 1.0 / rate
            self.capacity = 1
        self._clock = clock
        self._sleep = sleeper
        self._lock = threading.Lock()
        self._issued: deque[float] = deque()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self._clock()
                while self._issued and now - self._issued[0] >= self.window:
                    self._issued.popleft()
                if len(self._issued) < self.capacity:
                    self._issued.append(now)
                    return
                self._sleep(self.window - (now - self._issued[0]))


class ResponseCache:
    """One JSON file per key under cache_dir; writes are temp-then-rename."""

    def __init__(self, cache_dir: str | Path) -> None:
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["raw"]
        except (json.JSONDecodeError, KeyError, OSError):
            return None

    def put(self, key: str, raw: str, meta: dict | None = None) -> None:
        obj = {"raw": raw}
        if meta:
            obj.update(meta)
        fd, tmp_name = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(obj, handle, ensure_ascii=False)
            os.replace(tmp_name, self._path(key))
        finally:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)


def cache_key(prompt_text: str, model_id: str) -> str:
    return fnv1a64_hex(prompt_text + model_id)


@dataclass
class ClientStats:
    requests: int = 0
    retries: int = 0
    cache_hits: int = 0
    failures: int = 0

    def snapshot(self) -> dict[str, int]:
        return {
            "requests": self.requests,
            "retries": self.retries,
            "cache_hits": self.cache_hits,
            "failures": self.failures,
        }


class EndpointSession:
    """Rate-limited JSON POST with retry on transport errors and 5xx/429."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: Transport = httpx_transport,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.transport = transport
        self.stats = ClientStats()
        self._sleep = sleeper
        self._limiter = RateLimiter(config.requests_per_second, clock=clock, sleeper=sleeper)

    def _headers(self) -> dict[str, str]:
        headers = {"content-type": "application/json"}
        token = self.config.auth_token()
        if token:
            headers["authorization"] = f"Bearer {token}"
        return headers

    def _backoff_s(self, retry_index: int) -> float:
        schedule = self.config.retry_backoff_ms
        if not schedule:
            return 0.0
        return schedule[min(retry_index, len(schedule) - 1)] / 1000.0

    def post_json(self, url: str, body: dict) -> str:
        attempts = 0
        last_detail = "no attempts made"
        last_status: int | None = None
        while attempts <= self.config.max_retries:
            self._limiter.acquire()
            attempts += 1
            self.stats.requests += 1
            try:
                response = self.transport(url, self._headers(), body, self.config.timeout_s)
            except TransportError as exc:
                last_detail, last_status = str(exc), None
            else:
                if 200 <= response.status < 300:
                    return response.text
                last_detail = f"HTTP {response.status}: {response.text[:200]}"
                last_status = response.status
                if response.status not in RETRYABLE_STATUSES:
                    break
            if attempts <= self.config.max_retries:
                self.stats.retries += 1
                self._sleep(self._backoff_s(attempts - 1))
        self.stats.failures += 1
        raise EndpointError(last_detail, attempts=attempts, status=last_status)


def _chat_body(payload: PromptPayload, model_id: str) -> dict:
    content: list[dict] = []
    if payload.image_ref:
        content.append({"type": "image_url", "image_url": {"url": payload.image_ref}})
    content.append({"type": "text", "text": payload.text})
    return {
        "model": model_id,
        "messages": [{"role": "user", "content": content}],
        "temperature": 0,
    }


def _extract_chat_text(body_text: str) -> str:
    try:
        obj = json.loads(body_text)
        content = obj["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise EndpointError(f"malformed chat-completions response: {exc}") from exc
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise EndpointError("chat-completions content is not text")
    return content


@dataclass(frozen=True)
class ScoreOutcome:
    record: PairRecord
    annotation: Annotation | None = None
    error: str | None = None
    failure: str | None = None  # "endpoint" | "unparseable"


class ScoringClient:
    """Scores pair records through one endpoint, cache-first."""

    def __init__(
        self,
        config: EndpointConfig,
        rubric: Rubric,
        *,
        transport: Transport = httpx_transport,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
        now: Callable[[], str] = utc_now_iso,
    ) -> None:
        self.config = config
        self.rubric = rubric
        self.session = EndpointSession(config, transport=transport, clock=clock, sleeper=sleeper)
        self._now = now
        self._cache = ResponseCache(config.cache_dir) if config.cache_dir else None

    @property
    def stats(self) -> ClientStats:
        return self.session.stats

    def _fetch_raw(self, rec: PairRecord, payload: PromptPayload) -> str:
        if self.config.adapter == "mock":
            score = mock_score(rec)
            return json.dumps({"score": score, "rationale": f"mock score {score}"})
        key = cache_key(payload.text, self.config.model_id)
        if self._cache is not None:
            cached = self._cache.get(key)
            if cached is not None:
                self.stats.cache_hits += 1
                return cached
        if self.config.adapter == "native":
            url = self.config.base_url.rstrip("/") + "/v1/score"
            body = {
                "image_ref": rec.image_ref,
                "caption": rec.caption,
                "rubric": rubric_to_dict(self.rubric),
            }
            raw = self.session.post_json(url, body)
        else:
            url = self.config.base_url.rstrip("/") + "/chat/completions"
            raw = _extract_chat_text(
                self.session.post_json(url, _chat_body(payload, self.config.model_id))
            )
        if self._cache is not None:
            self._cache.put(key, raw, {"model_id": self.config.model_id, "pair_id": rec.id})
        return raw

    def score_pair(self, rec: PairRecord) -> Annotation:
        """Score one record; cache-first, then rate-limited request with retries."""
        payload = build_score_prompt(rec, self.rubric)
        raw = self._fetch_raw(rec, payload)
        parsed = parse_scorer_output(raw, self.rubric.scale_min, self.rubric.scale_max)
        return Annotation(
            pair_id=rec.id,
            score=parsed.score,
            rationale=parsed.rationale,
            annotator=self.config.model_id,
            review_state=PENDING,
            ts=self._now(),
        )

    def score_many(self, records: Sequence[PairRecord]) -> list[ScoreOutcome]:
        """Fan out score_pair with at most max_parallel requests in flight."""
        outcomes: list[ScoreOutcome | None] = [None] * len(records)

        def work(index: int, rec: PairRecord) -> None:
            try:
                outcomes[index] = ScoreOutcome(record=rec, annotation=self.score_pair(rec))
            except EndpointError as exc:
                outcomes[index] = ScoreOutcome(record=rec, error=str(exc), failure="endpoint")
            except CorpusSieveError as exc:
                outcomes[index] = ScoreOutcome(record=rec, error=str(exc), failure="unparseable")

        with ThreadPoolExecutor(max_workers=self.config.max_parallel) as pool:
            for future in [pool.submit(work, i, rec) for i, rec in enumerate(records)]:
                future.result()
        return [outcome for outcome in outcomes if outcome is not None]


class EndpointEmbedder:
    """Embeddings from POST /v1/embed {"kind", "content"} -> {"embedding"}."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: Transport = httpx_transport,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.session = EndpointSession(config, transport=transport, clock=clock, sleeper=sleeper)

    @property
    def stats(self) -> ClientStats:
        return self.session.stats

    def embed(self, kind: str, content: str) -> list[float]:
        if kind not in ("image", "text"):
            raise ValueError(f"kind must be image or text, got {kind!r}")
        url = self.config.base_url.rstrip("/") + "/v1/embed"
        raw = self.session.post_json(url, {"kind": kind, "content": content})
        try:
            return [float(x) for x in json.loads(raw)["embedding"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise EndpointError(f"malformed embed response: {exc}") from exc

    def pair_vectors(self, rec: PairRecord) -> tuple[list[float], list[float]]:
        from .stats import PairEmbeddingError

        try:
            return self.embed("image", rec.image_ref), self.embed("text", rec.caption)
        except EndpointError as exc:
            raise PairEmbeddingError(rec.id, str(exc)) from exc
