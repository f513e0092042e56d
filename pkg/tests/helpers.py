"""Shared test fixtures: synthetic corpora and scripted transports."""
from __future__ import annotations

from corpus_sieve.client import TransportError, WireResponse
from corpus_sieve.manifest import Manifest, PairRecord


def synthetic_manifest(n: int, prefix: str = "synthetic") -> Manifest:
    records = tuple(
        PairRecord(
            image_ref=f"http://{prefix}.example/images/{i:05d}.jpg",
            caption=f"synthetic caption {i} describing scene {i % 7}",
            source="synthetic",
        )
        for i in range(n)
    )
    return Manifest(records=records)


class ScriptedTransport:
    """Replays a fixed sequence of WireResponse / exception entries."""

    def __init__(self, script: list) -> None:
        self.script = list(script)
        self.calls: list[tuple[str, dict, dict]] = []

    def __call__(self, url: str, headers: dict, body: dict, timeout: float) -> WireResponse:
        self.calls.append((url, headers, body))
        if not self.script:
            raise AssertionError("scripted transport exhausted")
        entry = self.script.pop(0)
        if isinstance(entry, Exception):
            raise entry
        return entry


def transport_error(detail: str = "connection refused") -> TransportError:
    return TransportError(detail)
