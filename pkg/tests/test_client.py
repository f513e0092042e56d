import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from corpus_sieve.annotations import PENDING
from corpus_sieve.client import (
    EndpointConfig,
    EndpointError,
    EndpointEmbedder,
    RateLimiter,
    ResponseCache,
    ScoringClient,
    WireResponse,
    cache_key,
)
from corpus_sieve.gateway import UnparseableError, build_score_prompt, default_rubric
from corpus_sieve.hashing import fnv1a64_hex
from corpus_sieve.stats import PairEmbeddingError
from helpers import ScriptedTransport, synthetic_manifest, transport_error

RUBRIC = default_rubric()
REC = synthetic_manifest(3).records[0]


def _config(**kwargs) -> EndpointConfig:
    defaults = dict(
        base_url="http://scorer.test",
        adapter="native",
        model_id="unit-model",
        requests_per_second=1000.0,
        max_retries=3,
        retry_backoff_ms=(0, 0, 0),
        timeout_s=5.0,
    )
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


class FakeClock:
    def __init__(self) -> None:
        self.now = 0.0

    def __call__(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.now += max(seconds, 0.0)


def test_endpoint_config_validation():
    with pytest.raises(ValueError):
        EndpointConfig(adapter="carrier-pigeon")
    with pytest.raises(ValueError):
        EndpointConfig(max_parallel=0)
    with pytest.raises(ValueError):
        EndpointConfig(requests_per_second=0)
    with pytest.raises(ValueError):
        EndpointConfig(retry_backoff_ms=(500, 100))


@pytest.mark.parametrize("rps", [1.0, 2.5, 7.0])
def test_rate_limiter_bounds_any_one_second_window(rps):
    clock = FakeClock()
    limiter = RateLimiter(rps, clock=clock, sleeper=clock.sleep)
    issued = []
    for _ in range(40):
        limiter.acquire()
        issued.append(clock.now)
    cap = math.ceil(rps)
    for i, start in enumerate(issued):
        in_window = [t for t in issued if start <= t < start + 1.0]
        assert len(in_window) <= cap


def test_rate_limiter_slower_than_one_per_second():
    clock = FakeClock()
    limiter = RateLimiter(0.5, clock=clock, sleeper=clock.sleep)
    for _ in range(5):
        limiter.acquire()
    # 1 request per 2 seconds once the first slot is used
    assert clock.now >= 8.0


def test_response_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    assert cache.get("00" * 8) is None
    cache.put("00" * 8, '{"score": 5}', {"model_id": "m"})
    assert cache.get("00" * 8) == '{"score": 5}'
    leftovers = [p for p in (tmp_path / "cache").iterdir() if p.suffix == ".tmp"]
    assert leftovers == []


def test_cache_key_is_fnv_of_prompt_plus_model():
    assert cache_key("prompt text", "model-x") == fnv1a64_hex("prompt text" + "model-x")


def _native_ok(score=8, rationale="fine"):
    return WireResponse(200, json.dumps({"score": score, "rationale": rationale}))


def test_score_pair_parses_native_response():
    transport = ScriptedTransport([_native_ok(7, "sharp caption")])
    client = ScoringClient(_config(), RUBRIC, transport=transport, now=lambda: "T0")
    ann = client.score_pair(REC)
    assert (ann.score, ann.rationale) == (7, "sharp caption")
    assert ann.annotator == "unit-model"
    assert ann.review_state == PENDING
    assert ann.ts == "T0"
    url, headers, body = transport.calls[0]
    assert url == "http://scorer.test/v1/score"
    assert body["image_ref"] == REC.image_ref and body["caption"] == REC.caption
    assert body["rubric"]["scale_max"] == 10


def test_retries_on_5xx_then_success():
    transport = ScriptedTransport(
        [WireResponse(500, "boom"), WireResponse(500, "boom"), _native_ok(9)]
    )
    clock = FakeClock()
    client = ScoringClient(
        _config(), RUBRIC, transport=transport, clock=clock, sleeper=clock.sleep
    )
    ann = client.score_pair(REC)
    assert ann.score == 9
    assert client.stats.requests == 3
    assert client.stats.retries == 2
    assert client.stats.failures == 0


def test_4xx_fails_immediately_without_retry():
    transport = ScriptedTransport([WireResponse(403, "forbidden")])
    client = ScoringClient(_config(), RUBRIC, transport=transport)
    with pytest.raises(EndpointError) as exc:
        client.score_pair(REC)
    assert exc.value.attempts == 1
    assert exc.value.status == 403
    assert client.stats.requests == 1


def test_transport_errors_exhaust_retries():
    transport = ScriptedTransport([transport_error() for _ in range(4)])
    clock = FakeClock()
    client = ScoringClient(
        _config(max_retries=3), RUBRIC, transport=transport, clock=clock, sleeper=clock.sleep
    )
    with pytest.raises(EndpointError) as exc:
        client.score_pair(REC)
    assert exc.value.attempts == 4
    assert client.stats.failures == 1


def test_backoff_schedule_clamps_to_last_entry():
    clock = FakeClock()
    transport = ScriptedTransport([transport_error() for _ in range(4)])
    client = ScoringClient(
        _config(max_retries=3, retry_backoff_ms=(100, 200)),
        RUBRIC,
        transport=transport,
        clock=clock,
        sleeper=clock.sleep,
    )
    with pytest.raises(EndpointError):
        client.score_pair(REC)
    assert clock.now == pytest.approx(0.1 + 0.2 + 0.2)


def test_warm_cache_measured_via_request_counter(tmp_path):
    config = _config(cache_dir=tmp_path / "cache")
    transport = ScriptedTransport([_native_ok(6, "cached")])
    client = ScoringClient(config, RUBRIC, transport=transport, now=lambda: "T0")
    first = client.score_pair(REC)
    assert client.stats.requests == 1

    # fresh client, same cache dir: zero network operations
    client2 = ScoringClient(
        _config(cache_dir=tmp_path / "cache"),
        RUBRIC,
        transport=ScriptedTransport([]),
        now=lambda: "T0",
    )
    second = client2.score_pair(REC)
    assert client2.stats.requests == 0
    assert client2.stats.cache_hits == 1
    assert second == first


def test_unparseable_response_is_cached_for_audit(tmp_path):
    config = _config(cache_dir=tmp_path / "cache")
    transport = ScriptedTransport([WireResponse(200, "no score here")])
    client = ScoringClient(config, RUBRIC, transport=transport)
    with pytest.raises(UnparseableError) as exc:
        client.score_pair(REC)
    assert exc.value.raw == "no score here"
    key = cache_key(build_score_prompt(REC, RUBRIC).text, "unit-model")
    assert ResponseCache(tmp_path / "cache").get(key) == "no score here"


def test_chat_adapter_body_and_extraction():
    reply = {"choices": [{"message": {"content": '{"score": 8, "rationale": "from chat"}'}}]}
    transport = ScriptedTransport([WireResponse(200, json.dumps(reply))])
    client = ScoringClient(_config(adapter="chat", model_id="vlm-1"), RUBRIC, transport=transport)
    ann = client.score_pair(REC)
    assert ann.score == 8 and ann.rationale == "from chat"
    url, _, body = transport.calls[0]
    assert url == "http://scorer.test/chat/completions"
    assert body["model"] == "vlm-1"
    assert body["temperature"] == 0
    parts = body["messages"][0]["content"]
    assert parts[0] == {"type": "image_url", "image_url": {"url": REC.image_ref}}
    assert parts[1]["type"] == "text"


def test_chat_adapter_rejects_malformed_envelope():
    transport = ScriptedTransport([WireResponse(200, '{"nonsense": true}')])
    client = ScoringClient(_config(adapter="chat"), RUBRIC, transport=transport)
    with pytest.raises(EndpointError):
        client.score_pair(REC)


def test_auth_header_from_named_env_var(monkeypatch):
    monkeypatch.setenv("UNIT_SCORER_TOKEN", "sekrit")
    transport = ScriptedTransport([_native_ok()])
    client = ScoringClient(
        _config(auth_token_env="UNIT_SCORER_TOKEN"), RUBRIC, transport=transport
    )
    client.score_pair(REC)
    _, headers, _ = transport.calls[0]
    assert headers["authorization"] == "Bearer sekrit"


def test_no_auth_header_when_env_missing(monkeypatch):
    monkeypatch.delenv("UNIT_SCORER_TOKEN", raising=False)
    transport = ScriptedTransport([_native_ok()])
    client = ScoringClient(
        _config(auth_token_env="UNIT_SCORER_TOKEN"), RUBRIC, transport=transport
    )
    client.score_pair(REC)
    _, headers, _ = transport.calls[0]
    assert "authorization" not in headers


def test_score_many_preserves_order_and_collects_failures():
    manifest = synthetic_manifest(4)
    script = [
        _native_ok(9, "ok"),
        WireResponse(404, "missing"),
        WireResponse(200, "garbage"),
        _native_ok(2, "ok2"),
    ]
    transport = ScriptedTransport(script)
    client = ScoringClient(_config(max_parallel=1, max_retries=0), RUBRIC, transport=transport)
    outcomes = client.score_many(manifest.records)
    assert [o.record.id for o in outcomes] == list(manifest.ids())
    assert outcomes[0].annotation.score == 9
    assert outcomes[1].failure == "endpoint"
    assert outcomes[2].failure == "unparseable"
    assert outcomes[3].annotation.score == 2


def test_score_many_bounds_in_flight_requests():
    manifest = synthetic_manifest(12)
    gauge_lock = threading.Lock()
    state = {"in_flight": 0, "max_seen": 0}

    def transport(url, headers, body, timeout):
        with gauge_lock:
            state["in_flight"] += 1
            state["max_seen"] = max(state["max_seen"], state["in_flight"])
        threading.Event().wait(0.02)
        with gauge_lock:
            state["in_flight"] -= 1
        return _native_ok()

    client = ScoringClient(_config(max_parallel=3), RUBRIC, transport=transport)
    outcomes = client.score_many(manifest.records)
    assert all(o.annotation is not None for o in outcomes)
    assert 1 <= state["max_seen"] <= 3


class _NativeScorerHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("content-length", "0"))
        body = json.loads(self.rfile.read(length))
        if self.path == "/v1/score":
            reply = {"score": 9, "rationale": f"scored {body['caption'][:20]}"}
        elif self.path == "/v1/embed":
            reply = {"embedding": [1.0, 2.0, 3.0] if body["kind"] == "image" else [1.0, 2.0, 2.9]}
        else:
            self.send_response(404)
            self.end_headers()
            return
        payload = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("content-type", "application/json")
        self.send_header("content-length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture()
def native_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _NativeScorerHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_native_adapter_against_real_server(native_server):
    client = ScoringClient(_config(base_url=native_server), RUBRIC)
    ann = client.score_pair(REC)
    assert ann.score == 9
    assert ann.rationale.startswith("scored ")


def test_endpoint_embedder_against_real_server(native_server):
    embedder = EndpointEmbedder(_config(base_url=native_server))
    image_vec, caption_vec = embedder.pair_vectors(REC)
    assert image_vec == [1.0, 2.0, 3.0]
    assert caption_vec == [1.0, 2.0, 2.9]


def test_endpoint_embedder_wraps_failures_per_pair():
    embedder = EndpointEmbedder(
        _config(max_retries=0), transport=ScriptedTransport([transport_error()])
    )
    with pytest.raises(PairEmbeddingError):
        embedder.pair_vectors(REC)
