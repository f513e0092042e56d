"""Command-line entry point.

Subcommands: annotate, filter, stats, judge, review-serve, export-sft,
sample. Every run resolves its configuration once (flags override a JSON
--config file, which overrides built-in defaults), records it in
<out-dir>/run.json, and takes all timestamps from that resolved config, so
re-running from a run.json reproduces outputs byte for byte.

Exit codes: 0 success, 2 config error, 3 partial failure with outputs
preserved, 4 endpoint failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import signal
import sys
import threading
from pathlib import Path

from .annotations import ACCEPTED, AnnotationStore, export_sft, utc_now_iso
from .client import EndpointConfig, EndpointError, ScoringClient
from .errors import ConfigError, CorpusSieveError
from .filtering import build_splits, bucketize, parse_bucket_edges, sample_random, write_split_files
from .gateway import (
    UnparseableError,
    build_judge_prompt,
    default_rubric,
    load_rubric,
    parse_judge_verdict,
)
from .manifest import Manifest, read_manifest_file
from .report import StatsReport, render_json, render_markdown
from .review_server import make_review_server
from .stats import (
    FileEmbeddings,
    bucket_alignment_table,
    corpus_perplexity,
    load_logprobs,
    load_verdicts,
    mean_alignment,
    preference_rate,
    students_t_two_sample,
    welch_t_two_sample,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_ENDPOINT = 4

JOURNAL_NAME = "annotations.jsonl"

_DEFAULTS: dict[str, dict] = {
    "annotate": {
        "manifest": None,
        "manifest_format": None,
        "endpoint": "mock",
        "base_url": "",
        "model": None,
        "rubric": None,
        "cache_dir": None,
        "max_parallel": 4,
        "rps": 8.0,
        "max_retries": 3,
        "backoff_ms": "250,500,1000,2000",
        "auth_env": "",
        "timeout_s": 60.0,
        "auto_accept": False,
        "out_dir": None,
        "timestamp": None,
    },
    "filter": {
        "manifest": None,
        "journal": None,
        "threshold": 9,
        "seed": 0,
        "out_dir": None,
        "timestamp": None,
    },
    "stats": {
        "full": None,
        "filtered": None,
        "random": None,
        "embeddings": None,
        "embed_endpoint": None,
        "logprobs": None,
        "verdicts": None,
        "journal": None,
        "bucket_edges": "1-3,4-6,7-8,9-10",
        "welch": False,
        "format": "markdown",
        "out_dir": None,
        "timestamp": None,
    },
    "judge": {
        "triples": None,
        "outputs": None,
        "seed": 0,
        "out_dir": None,
        "timestamp": None,
    },
    "export-sft": {
        "journal": None,
        "manifest": None,
        "out_dir": None,
        "timestamp": None,
    },
    "review-serve": {
        "journal": None,
        "manifest": None,
        "static_dir": None,
        "host": "127.0.0.1",
        "port": 8787,
        "out_dir": None,
        "timestamp": None,
    },
    "sample": {
        "manifest": None,
        "n": None,
        "seed": 0,
        "name": "sample",
        "out_dir": None,
        "timestamp": None,
    },
}


def _resolve_config(args: argparse.Namespace, subcommand: str) -> dict:
    """CLI flags override the --config file, which overrides defaults."""
    defaults = _DEFAULTS[subcommand]
    resolved = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("--config must contain a JSON object")
        declared = loaded.pop("subcommand", None)
        if declared is not None and declared != subcommand:
            raise ConfigError(f"config file is for {declared!r}, invoked {subcommand!r}")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    if not resolved.get("timestamp"):
        resolved["timestamp"] = utc_now_iso()
    return resolved


def _require(resolved: dict, *keys: str) -> None:
    missing = [key for key in keys if resolved.get(key) in (None, "")]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + k for k in missing)}")


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_json(out_dir: Path, subcommand: str, resolved: dict) -> None:
    obj = {"subcommand": subcommand}
    obj.update(resolved)
    (out_dir / "run.json").write_text(
        json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _print_summary(summary: dict) -> None:
    print(json.dumps(summary, ensure_ascii=False, sort_keys=True))


def _read_manifest(resolved: dict, key: str = "manifest", fmt_key: str = "manifest_format") -> Manifest:
    path = resolved[key]
    if not Path(path).exists():
        raise ConfigError(f"manifest not found: {path}")
    return read_manifest_file(path, resolved.get(fmt_key))


def _load_jsonl(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    lines = [json.dumps(row, ensure_ascii=False, sort_keys=True) for row in rows]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _itemized(ids: list[str], what: str) -> ConfigError:
    shown = ", ".join(ids[:20]) + (" ..." if len(ids) > 20 else "")
    return ConfigError(f"{len(ids)} pair id(s) missing {what}: {shown}")


def cmd_annotate(resolved: dict) -> int:
    _require(resolved, "manifest", "out_dir")
    if resolved["endpoint"] not in ("mock", "native", "chat"):
        raise ConfigError(f"unknown endpoint kind {resolved['endpoint']!r}")
    if resolved["endpoint"] != "mock" and not resolved["base_url"]:
        raise ConfigError(f"--base-url is required for endpoint {resolved['endpoint']!r}")
    manifest = _read_manifest(resolved)
    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "annotate", resolved)

    rubric = load_rubric(resolved["rubric"]) if resolved["rubric"] else default_rubric()
    model = resolved["model"] or ("mock" if resolved["endpoint"] == "mock" else "scorer")
    cache_dir = resolved["cache_dir"]
    if cache_dir is None and resolved["endpoint"] != "mock":
        cache_dir = out_dir / "cache"
    try:
        config = EndpointConfig(
            base_url=resolved["base_url"],
            adapter=resolved["endpoint"],
            model_id=model,
            auth_token_env=resolved["auth_env"],
            max_parallel=int(resolved["max_parallel"]),
            requests_per_second=float(resolved["rps"]),
            max_retries=int(resolved["max_retries"]),
            retry_backoff_ms=tuple(
                int(x) for x in str(resolved["backoff_ms"]).split(",") if x.strip()
            ),
            cache_dir=cache_dir,
            timeout_s=float(resolved["timeout_s"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    timestamp = resolved["timestamp"]
    client = ScoringClient(config, rubric, now=lambda: timestamp)
    journal_path = out_dir / JOURNAL_NAME
    journal_path.touch(exist_ok=True)
    store = AnnotationStore(journal_path, now=lambda: timestamp)
    outcomes = client.score_many(manifest.records)
    scored = failed = unparseable = 0
    for outcome in outcomes:
        if outcome.annotation is not None:
            annotation = outcome.annotation
            if resolved["auto_accept"]:
                annotation = dataclasses.replace(annotation, review_state=ACCEPTED)
            store.append(annotation)
            scored += 1
        elif outcome.failure == "endpoint":
            failed += 1
            print(f"endpoint failure for {outcome.record.id}: {outcome.error}", file=sys.stderr)
        else:
            unparseable += 1
            print(f"unparseable reply for {outcome.record.id}: {outcome.error}", file=sys.stderr)
    store.close()

    summary = {"scored": scored, "failed": failed, "unparseable": unparseable}
    summary.update(client.stats.snapshot())
    _print_summary(summary)
    if failed and failed == len(manifest):
        return EXIT_ENDPOINT
    if failed or unparseable:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_filter(resolved: dict) -> int:
    _require(resolved, "manifest", "journal", "out_dir")
    threshold = int(resolved["threshold"])
    if not 1 <= threshold <= 10:
        raise ConfigError(f"threshold must be in [1, 10], got {threshold}")
    manifest = _read_manifest(resolved)
    if not Path(resolved["journal"]).exists():
        raise ConfigError(f"journal not found: {resolved['journal']}")
    scores = AnnotationStore(resolved["journal"]).effective_scores()
    missing = [pid for pid in manifest.ids() if pid not in scores]
    if missing:
        raise _itemized(missing, "scores in the journal")

    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "filter", resolved)
    splits = build_splits(
        manifest,
        scores,
        threshold,
        int(resolved["seed"]),
        created_ts=resolved["timestamp"],
    )
    for split in splits.values():
        write_split_files(split, manifest, out_dir)
    _print_summary(
        {
            "full": len(splits["full"]),
            "filtered": len(splits["filtered"]),
            "random": len(splits["random"]),
            "threshold": threshold,
            "seed": int(resolved["seed"]),
        }
    )
    return EXIT_OK


def _stats_alignment(
    report: StatsReport, splits: dict[str, Manifest], embedder, welch: bool
) -> None:
    for name, manifest in splits.items():
        if isinstance(embedder, FileEmbeddings):
            missing = [pid for pid in manifest.ids() if pid not in embedder]
            if missing:
                raise _itemized(missing, f"embeddings for split {name!r}")
        report.alignment[name] = mean_alignment(manifest.records, embedder)
    if "filtered" in report.alignment and "random" in report.alignment:
        filtered = report.alignment["filtered"].sample()
        random_sample = report.alignment["random"].sample()
        if len(filtered) >= 2 and len(random_sample) >= 2:
            report.significance = students_t_two_sample(filtered, random_sample)
            if welch:
                report.welch = welch_t_two_sample(filtered, random_sample)


def _stats_perplexity(
    report: StatsReport, splits: dict[str, Manifest], logprobs: dict[str, list[float]]
) -> None:
    for name, manifest in splits.items():
        missing = [pid for pid in manifest.ids() if pid not in logprobs]
        if missing:
            raise _itemized(missing, f"logprobs for split {name!r}")
        report.perplexity[name] = corpus_perplexity([logprobs[pid] for pid in manifest.ids()])


def _stats_buckets(
    report: StatsReport, resolved: dict, splits: dict[str, Manifest], embedder
) -> None:
    full = splits.get("full")
    if full is None:
        raise ConfigError("--journal bucket analysis needs --full")
    try:
        spec = parse_bucket_edges(resolved["bucket_edges"])
    except ValueError as exc:
        raise ConfigError(f"bad --bucket-edges: {exc}") from exc
    scores = AnnotationStore(resolved["journal"]).effective_scores()
    missing = [pid for pid in full.ids() if pid not in scores]
    if missing:
        raise _itemized(missing, "scores in the journal")
    ordered_scores = {pid: scores[pid] for pid in full.ids()}
    buckets = bucketize(ordered_scores, spec)
    report.buckets = bucket_alignment_table(buckets, full.by_id(), embedder)


def cmd_stats(resolved: dict) -> int:
    _require(resolved, "out_dir")
    splits: dict[str, Manifest] = {}
    for name in ("full", "filtered", "random"):
        if resolved[name]:
            if not Path(resolved[name]).exists():
                raise ConfigError(f"split manifest not found: {resolved[name]}")
            splits[name] = read_manifest_file(resolved[name])

    report = StatsReport(meta={"generated": resolved["timestamp"]})
    have_section = False

    if resolved["embeddings"] and resolved["embed_endpoint"]:
        raise ConfigError("give either --embeddings or --embed-endpoint, not both")
    embedder = None
    if resolved["embeddings"]:
        embedder = FileEmbeddings.load(resolved["embeddings"])
    elif resolved["embed_endpoint"]:
        from .client import EndpointEmbedder

        embedder = EndpointEmbedder(
            EndpointConfig(base_url=resolved["embed_endpoint"], requests_per_second=128.0)
        )
    if embedder is not None and splits:
        _stats_alignment(report, splits, embedder, bool(resolved["welch"]))
        have_section = True
        if resolved["journal"]:
            _stats_buckets(report, resolved, splits, embedder)
    if resolved["logprobs"] and splits:
        _stats_perplexity(report, splits, load_logprobs(resolved["logprobs"]))
        have_section = True
    if resolved["verdicts"]:
        if not Path(resolved["verdicts"]).exists():
            raise ConfigError(f"verdicts file not found: {resolved['verdicts']}")
        tally = load_verdicts(resolved["verdicts"])
        report.preference = preference_rate(list(tally.outcomes))
        report.raw_slot_a_rate = tally.raw_slot_a_rate
        have_section = True
    if not have_section:
        raise ConfigError("no stats inputs given (embeddings, logprobs, or verdicts)")

    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "stats", resolved)
    markdown = render_markdown(report)
    json_text = render_json(report)
    (out_dir / "report.md").write_text(markdown, encoding="utf-8")
    (out_dir / "report.json").write_text(json_text, encoding="utf-8")
    print(markdown if resolved["format"] == "markdown" else json_text, end="")
    return EXIT_OK


def cmd_judge(resolved: dict) -> int:
    _require(resolved, "out_dir")
    if bool(resolved["triples"]) == bool(resolved["outputs"]):
        raise ConfigError("judge needs exactly one of --triples or --outputs")
    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "judge", resolved)

    if resolved["triples"]:
        rows = []
        for obj in _load_jsonl(resolved["triples"]):
            prompt = build_judge_prompt(
                obj["reference"],
                obj["candidate_filtered"],
                obj["candidate_full"],
                item_id=str(obj["item_id"]),
                seed=int(resolved["seed"]),
            )
            rows.append(
                {
                    "item_id": prompt.item_id,
                    "presentation_order": prompt.presentation_order,
                    "prompt": prompt.payload.text,
                }
            )
        _write_jsonl(out_dir / "judge_prompts.jsonl", rows)
        _print_summary({"prompts": len(rows)})
        return EXIT_OK

    rows = []
    unparseable = 0
    for obj in _load_jsonl(resolved["outputs"]):
        try:
            verdict = parse_judge_verdict(obj["output"])
        except UnparseableError as exc:
            unparseable += 1
            print(f"unparseable judge output for {obj.get('item_id')}: {exc}", file=sys.stderr)
            continue
        rows.append(
            {
                "item_id": obj["item_id"],
                "verdict": verdict,
                "presentation_order": obj["presentation_order"],
            }
        )
    _write_jsonl(out_dir / "verdicts.jsonl", rows)
    _print_summary({"parsed": len(rows), "unparseable": unparseable})
    return EXIT_PARTIAL if unparseable else EXIT_OK


def cmd_export_sft(resolved: dict) -> int:
    _require(resolved, "journal", "manifest", "out_dir")
    manifest = _read_manifest(resolved)
    if not Path(resolved["journal"]).exists():
        raise ConfigError(f"journal not found: {resolved['journal']}")
    store = AnnotationStore(resolved["journal"])
    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "export-sft", resolved)
    summary = export_sft(store, manifest, out_dir / "sft.jsonl")
    _print_summary(
        {"exported": summary.exported, "pending": summary.pending, "missing": summary.missing}
    )
    return EXIT_OK


def cmd_sample(resolved: dict) -> int:
    _require(resolved, "manifest", "n", "out_dir")
    manifest = _read_manifest(resolved)
    out_dir = _out_dir(resolved)
    _write_run_json(out_dir, "sample", resolved)
    split = sample_random(
        manifest,
        int(resolved["n"]),
        int(resolved["seed"]),
        name=resolved["name"],
        created_ts=resolved["timestamp"],
    )
    write_split_files(split, manifest, out_dir)
    _print_summary({"name": resolved["name"], "n": len(split), "seed": int(resolved["seed"])})
    return EXIT_OK


def cmd_review_serve(resolved: dict) -> int:
    _require(resolved, "journal", "manifest")
    manifest = _read_manifest(resolved)
    journal_path = Path(resolved["journal"])
    journal_path.touch(exist_ok=True)
    store = AnnotationStore(journal_path)
    if resolved["out_dir"]:
        _write_run_json(_out_dir(resolved), "review-serve", resolved)
    try:
        server = make_review_server(
            store,
            manifest,
            host=resolved["host"],
            port=int(resolved["port"]),
            static_dir=resolved["static_dir"],
        )
    except OSError as exc:
        print(f"cannot bind {resolved['host']}:{resolved['port']}: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT

    def _shutdown(signum, frame) -> None:
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    host, port = server.server_address[:2]
    print(f"review service listening on http://{host}:{port}/", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        store.close()
    return EXIT_OK


_COMMANDS = {
    "annotate": cmd_annotate,
    "filter": cmd_filter,
    "stats": cmd_stats,
    "judge": cmd_judge,
    "export-sft": cmd_export_sft,
    "review-serve": cmd_review_serve,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corpus-sieve",
        description="Score, review, filter, and evaluate image-caption corpora.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out-dir", help="directory for outputs and run.json")
        p.add_argument("--timestamp", help="pin emitted timestamps (ISO-8601) for reproducibility")

    p = sub.add_parser("annotate", help="score a manifest through an endpoint into a journal")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--manifest-format", choices=["tsv2", "tsv3", "jsonl"])
    p.add_argument("--endpoint", choices=["mock", "native", "chat"])
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--rubric", help="rubric JSON file (default: packaged rubric)")
    p.add_argument("--cache-dir")
    p.add_argument("--max-parallel", type=int)
    p.add_argument("--rps", type=float, help="requests per second")
    p.add_argument("--max-retries", type=int)
    p.add_argument("--backoff-ms", help="comma-separated retry backoff schedule")
    p.add_argument("--auth-env", help="environment variable holding the bearer token")
    p.add_argument("--timeout-s", type=float)
    p.add_argument("--auto-accept", action="store_true", default=None)

    p = sub.add_parser("filter", help="build full/filtered/random splits from scores")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--journal")
    p.add_argument("--threshold", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("stats", help="compute alignment, significance, perplexity, preference")
    add_common(p)
    p.add_argument("--full")
    p.add_argument("--filtered")
    p.add_argument("--random")
    p.add_argument("--embeddings", help="embeddings JSONL file")
    p.add_argument("--embed-endpoint", help="base URL of a POST /v1/embed service")
    p.add_argument("--logprobs", help="token logprob JSONL file")
    p.add_argument("--verdicts", help="judge verdict JSONL file")
    p.add_argument("--journal", help="journal for bucket analysis scores")
    p.add_argument("--bucket-edges")
    p.add_argument("--welch", action="store_true", default=None)
    p.add_argument("--format", choices=["markdown", "json"])

    p = sub.add_parser("judge", help="build judge prompts or parse judge outputs")
    add_common(p)
    p.add_argument("--triples", help="JSONL of reference/candidate caption triples")
    p.add_argument("--outputs", help="JSONL of raw judge outputs to parse")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("export-sft", help="export reviewed annotations as SFT training data")
    add_common(p)
    p.add_argument("--journal")
    p.add_argument("--manifest")

    p = sub.add_parser("review-serve", help="serve the review API and UI bundle")
    add_common(p)
    p.add_argument("--journal")
    p.add_argument("--manifest")
    p.add_argument("--static-dir")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    p = sub.add_parser("sample", help="seeded uniform subset of a manifest")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--name")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        resolved = _resolve_config(args, args.subcommand)
        return _COMMANDS[args.subcommand](resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorpusSieveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
