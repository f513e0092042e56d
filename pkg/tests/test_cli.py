import json
from pathlib import Path

from corpus_sieve.annotations import AnnotationStore
from corpus_sieve.cli import main
from corpus_sieve.gateway import mock_score, presentation_order_for
from corpus_sieve.manifest import read_manifest_file, write_manifest_file
from corpus_sieve.stats import mock_embed, write_embeddings_file
from helpers import synthetic_manifest

TS = "2026-01-01T00:00:00Z"


def _write_manifest(tmp_path: Path, n: int = 20) -> Path:
    manifest = synthetic_manifest(n)
    path = tmp_path / "corpus.tsv"
    write_manifest_file(path, manifest, fmt="tsv3")
    return path


def _dir_bytes(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


def _annotate(tmp_path: Path, manifest_path: Path, out_name: str = "ann", auto=True) -> Path:
    out_dir = tmp_path / out_name
    argv = [
        "annotate",
        "--manifest",
        str(manifest_path),
        "--endpoint",
        "mock",
        "--out-dir",
        str(out_dir),
        "--timestamp",
        TS,
    ]
    if auto:
        argv.append("--auto-accept")
    assert main(argv) == 0
    return out_dir / "annotations.jsonl"


def test_annotate_mock_writes_deterministic_journal(tmp_path, capsys):
    manifest_path = _write_manifest(tmp_path, 100)
    journal = _annotate(tmp_path, manifest_path)
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary["scored"] == 100
    assert summary["failed"] == 0 and summary["unparseable"] == 0
    store = AnnotationStore(journal)
    manifest = read_manifest_file(manifest_path)
    assert len(store) == 100
    for rec in manifest.records:
        assert store.get(rec.id).score == mock_score(rec)
        assert store.get(rec.id).review_state == "accepted"


def test_annotate_twice_is_byte_identical(tmp_path):
    manifest_path = _write_manifest(tmp_path, 30)
    j1 = _annotate(tmp_path, manifest_path, "a1")
    j2 = _annotate(tmp_path, manifest_path, "a2")
    assert j1.read_bytes() == j2.read_bytes()


def test_annotate_empty_manifest_gives_empty_journal(tmp_path, capsys):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    out_dir = tmp_path / "out"
    code = main(
        ["annotate", "--manifest", str(path), "--out-dir", str(out_dir), "--timestamp", TS]
    )
    assert code == 0
    assert (out_dir / "annotations.jsonl").read_text() == ""
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary["scored"] == 0


def test_annotate_endpoint_down_exits_4(tmp_path, capsys):
    manifest_path = _write_manifest(tmp_path, 3)
    out_dir = tmp_path / "down"
    code = main(
        [
            "annotate",
            "--manifest",
            str(manifest_path),
            "--endpoint",
            "native",
            "--base-url",
            "http://127.0.0.1:9",  # discard port, nothing listens
            "--max-retries",
            "0",
            "--timeout-s",
            "0.2",
            "--out-dir",
            str(out_dir),
            "--timestamp",
            TS,
        ]
    )
    assert code == 4
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary["failed"] == 3
    assert summary["scored"] == 0


def test_annotate_requires_base_url_for_real_endpoints(tmp_path):
    manifest_path = _write_manifest(tmp_path, 2)
    code = main(
        [
            "annotate",
            "--manifest",
            str(manifest_path),
            "--endpoint",
            "native",
            "--out-dir",
            str(tmp_path / "x"),
        ]
    )
    assert code == 2


def test_filter_pipeline_and_determinism(tmp_path):
    manifest_path = _write_manifest(tmp_path, 60)
    journal = _annotate(tmp_path, manifest_path)
    outs = []
    for name in ("f1", "f2"):
        out_dir = tmp_path / name
        code = main(
            [
                "filter",
                "--manifest",
                str(manifest_path),
                "--journal",
                str(journal),
                "--threshold",
                "9",
                "--seed",
                "7",
                "--out-dir",
                str(out_dir),
                "--timestamp",
                TS,
            ]
        )
        assert code == 0
        # run.json echoes out_dir, which differs between the two runs by design
        outs.append({k: v for k, v in _dir_bytes(out_dir).items() if k != "run.json"})
    assert outs[0] == outs[1]
    filtered = read_manifest_file(tmp_path / "f1" / "filtered.tsv")
    random_split = read_manifest_file(tmp_path / "f1" / "random.tsv")
    assert len(filtered) == len(random_split)
    manifest = read_manifest_file(manifest_path)
    expected = [rec.id for rec in manifest.records if mock_score(rec) >= 9]
    assert filtered.ids() == expected


def test_filter_threshold_out_of_range_exits_2(tmp_path, capsys):
    manifest_path = _write_manifest(tmp_path, 5)
    journal = _annotate(tmp_path, manifest_path)
    code = main(
        [
            "filter",
            "--manifest",
            str(manifest_path),
            "--journal",
            str(journal),
            "--threshold",
            "11",
            "--out-dir",
            str(tmp_path / "bad"),
        ]
    )
    assert code == 2
    assert "threshold" in capsys.readouterr().err


def test_filter_missing_scores_exits_2_listing_ids(tmp_path, capsys):
    manifest_path = _write_manifest(tmp_path, 6)
    short = synthetic_manifest(3)
    short_path = tmp_path / "short.tsv"
    write_manifest_file(short_path, short, fmt="tsv3")
    journal = _annotate(tmp_path, short_path)
    code = main(
        [
            "filter",
            "--manifest",
            str(manifest_path),
            "--journal",
            str(journal),
            "--out-dir",
            str(tmp_path / "missing"),
        ]
    )
    assert code == 2
    err = capsys.readouterr().err
    manifest = read_manifest_file(manifest_path)
    assert manifest.records[4].id in err


def _prepare_stats_inputs(tmp_path: Path) -> dict:
    manifest_path = _write_manifest(tmp_path, 200)
    manifest = read_manifest_file(manifest_path)
    journal = _annotate(tmp_path, manifest_path)
    filter_dir = tmp_path / "splits"
    assert (
        main(
            [
                "filter",
                "--manifest",
                str(manifest_path),
                "--journal",
                str(journal),
                "--seed",
                "3",
                "--out-dir",
                str(filter_dir),
                "--timestamp",
                TS,
            ]
        )
        == 0
    )
    scores = AnnotationStore(journal).effective_scores()
    vectors = {
        rec.id: (
            mock_embed(rec, "image", scores[rec.id]),
            mock_embed(rec, "caption", scores[rec.id]),
        )
        for rec in manifest.records
    }
    embeddings = tmp_path / "embeddings.jsonl"
    write_embeddings_file(embeddings, vectors)
    logprobs = tmp_path / "logprobs.jsonl"
    lines = []
    for i, rec in enumerate(manifest.records):
        token_count = 2 + (i % 3)
        lines.append(
            json.dumps(
                {
                    "pair_id": rec.id,
                    "token_logprobs": [-(0.5 + 0.1 * (i % 7))] * token_count,
                }
            )
        )
    logprobs.write_text("\n".join(lines) + "\n")
    verdicts = tmp_path / "verdicts.jsonl"
    rows = []
    for i in range(10):
        order = presentation_order_for(5, f"item-{i}")
        letter = "A" if i % 3 else "B"
        rows.append({"item_id": f"item-{i}", "verdict": letter, "presentation_order": order})
    verdicts.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return {
        "manifest": manifest_path,
        "journal": journal,
        "splits": filter_dir,
        "embeddings": embeddings,
        "logprobs": logprobs,
        "verdicts": verdicts,
    }


def _stats_argv(inputs: dict, out_dir: Path, extra: list[str] = ()) -> list[str]:
    return [
        "stats",
        "--full",
        str(inputs["splits"] / "full.tsv"),
        "--filtered",
        str(inputs["splits"] / "filtered.tsv"),
        "--random",
        str(inputs["splits"] / "random.tsv"),
        "--embeddings",
        str(inputs["embeddings"]),
        "--logprobs",
        str(inputs["logprobs"]),
        "--verdicts",
        str(inputs["verdicts"]),
        "--journal",
        str(inputs["journal"]),
        "--out-dir",
        str(out_dir),
        "--timestamp",
        TS,
        *extra,
    ]


def test_stats_full_report(tmp_path, capsys):
    inputs = _prepare_stats_inputs(tmp_path)
    out_dir = tmp_path / "report"
    assert main(_stats_argv(inputs, out_dir)) == 0
    markdown = (out_dir / "report.md").read_text()
    stdout = capsys.readouterr().out
    assert "Image-caption alignment" in markdown
    assert "Caption perplexity" in markdown
    assert "Judge preference" in markdown
    assert "Score Range" in markdown
    assert markdown in stdout
    obj = json.loads((out_dir / "report.json").read_text())
    assert obj["alignment"]["significance"]["p_one_sided"] < 0.01
    split_names = [s["split"] for s in obj["alignment"]["splits"]]
    assert split_names == ["full", "random", "filtered"]
    assert obj["preference"]["total"] == 10
    assert len(obj["buckets"]["rows"]) == 4


def test_stats_welch_flag_prints_both_conventions(tmp_path):
    inputs = _prepare_stats_inputs(tmp_path)
    out_dir = tmp_path / "welch"
    assert main(_stats_argv(inputs, out_dir, ["--welch"])) == 0
    markdown = (out_dir / "report.md").read_text()
    assert "Welch variant" in markdown
    obj = json.loads((out_dir / "report.json").read_text())
    assert obj["alignment"]["welch"]["variant"] == "welch"
    assert obj["alignment"]["significance"]["df"] >= obj["alignment"]["welch"]["df"]


def test_stats_verdicts_only_report(tmp_path):
    inputs = _prepare_stats_inputs(tmp_path)
    out_dir = tmp_path / "pref-only"
    code = main(
        [
            "stats",
            "--verdicts",
            str(inputs["verdicts"]),
            "--out-dir",
            str(out_dir),
            "--timestamp",
            TS,
        ]
    )
    assert code == 0
    obj = json.loads((out_dir / "report.json").read_text())
    assert set(obj) == {"meta", "preference"}


def test_stats_missing_embeddings_are_itemized(tmp_path, capsys):
    inputs = _prepare_stats_inputs(tmp_path)
    # drop one pair from the embeddings file
    lines = inputs["embeddings"].read_text().strip().split("\n")
    inputs["embeddings"].write_text("\n".join(lines[:-1]) + "\n")
    dropped = json.loads(lines[-1])["pair_id"]
    code = main(_stats_argv(inputs, tmp_path / "bad"))
    assert code == 2
    assert dropped in capsys.readouterr().err


def test_stats_without_inputs_is_config_error(tmp_path):
    assert main(["stats", "--out-dir", str(tmp_path / "none")]) == 2


def test_stats_rerun_from_run_json_is_byte_identical(tmp_path):
    inputs = _prepare_stats_inputs(tmp_path)
    out_dir = tmp_path / "rerun"
    assert main(_stats_argv(inputs, out_dir)) == 0
    first = _dir_bytes(out_dir)
    assert main(["stats", "--config", str(out_dir / "run.json")]) == 0
    assert _dir_bytes(out_dir) == first


def test_run_json_round_trip_subcommand_guard(tmp_path):
    inputs = _prepare_stats_inputs(tmp_path)
    out_dir = tmp_path / "guard"
    assert main(_stats_argv(inputs, out_dir)) == 0
    assert main(["filter", "--config", str(out_dir / "run.json")]) == 2


def test_judge_prompt_building_and_parsing(tmp_path, capsys):
    triples = tmp_path / "triples.jsonl"
    rows = [
        {
            "item_id": f"item-{i}",
            "reference": f"reference caption {i}",
            "candidate_filtered": f"filtered caption {i}",
            "candidate_full": f"full caption {i}",
        }
        for i in range(6)
    ]
    triples.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out_dir = tmp_path / "judge"
    assert (
        main(
            [
                "judge",
                "--triples",
                str(triples),
                "--seed",
                "5",
                "--out-dir",
                str(out_dir),
                "--timestamp",
                TS,
            ]
        )
        == 0
    )
    prompts = [
        json.loads(line)
        for line in (out_dir / "judge_prompts.jsonl").read_text().strip().split("\n")
    ]
    assert len(prompts) == 6
    for row in prompts:
        assert row["presentation_order"] == presentation_order_for(5, row["item_id"])
        assert "Verdict: A" in row["prompt"]

    outputs = tmp_path / "outputs.jsonl"
    out_rows = [
        {"item_id": "item-0", "presentation_order": "AB", "output": "Verdict: A"},
        {"item_id": "item-1", "presentation_order": "BA", "output": "thinking...\nVerdict: B"},
        {"item_id": "item-2", "presentation_order": "AB", "output": "no verdict"},
    ]
    outputs.write_text("\n".join(json.dumps(r) for r in out_rows) + "\n")
    parse_dir = tmp_path / "parse"
    code = main(
        ["judge", "--outputs", str(outputs), "--out-dir", str(parse_dir), "--timestamp", TS]
    )
    assert code == 3  # one unparseable
    verdicts = [
        json.loads(line)
        for line in (parse_dir / "verdicts.jsonl").read_text().strip().split("\n")
    ]
    assert [v["verdict"] for v in verdicts] == ["A", "B"]
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary == {"parsed": 2, "unparseable": 1}


def test_judge_requires_exactly_one_mode(tmp_path):
    assert main(["judge", "--out-dir", str(tmp_path / "j")]) == 2


def test_export_sft_cli(tmp_path, capsys):
    manifest_path = _write_manifest(tmp_path, 10)
    journal = _annotate(tmp_path, manifest_path)  # auto-accepted
    out_dir = tmp_path / "sft"
    code = main(
        [
            "export-sft",
            "--journal",
            str(journal),
            "--manifest",
            str(manifest_path),
            "--out-dir",
            str(out_dir),
            "--timestamp",
            TS,
        ]
    )
    assert code == 0
    rows = [json.loads(l) for l in (out_dir / "sft.jsonl").read_text().strip().split("\n")]
    assert len(rows) == 10
    assert rows[0]["meta"]["hyperparams_hint"]["lr"] == 2e-6
    summary = json.loads(capsys.readouterr().out.strip().split("\n")[-1])
    assert summary == {"exported": 10, "missing": 0, "pending": 0}


def test_export_sft_all_pending_exits_3(tmp_path):
    manifest_path = _write_manifest(tmp_path, 4)
    journal = _annotate(tmp_path, manifest_path, auto=False)
    code = main(
        [
            "export-sft",
            "--journal",
            str(journal),
            "--manifest",
            str(manifest_path),
            "--out-dir",
            str(tmp_path / "sft"),
        ]
    )
    assert code == 3


def test_sample_subcommand(tmp_path):
    manifest_path = _write_manifest(tmp_path, 30)
    out_dir = tmp_path / "sampled"
    code = main(
        [
            "sample",
            "--manifest",
            str(manifest_path),
            "--n",
            "10",
            "--seed",
            "2",
            "--out-dir",
            str(out_dir),
            "--timestamp",
            TS,
        ]
    )
    assert code == 0
    sampled = read_manifest_file(out_dir / "sample.tsv")
    assert len(sampled) == 10
    assert main(
        [
            "sample",
            "--manifest",
            str(manifest_path),
            "--n",
            "99",
            "--out-dir",
            str(tmp_path / "too-big"),
        ]
    ) == 3


def test_stats_embed_endpoint_alternative(tmp_path):
    import json as json_mod
    import threading
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    class EmbedHandler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            length = int(self.headers.get("content-length", "0"))
            body = json_mod.loads(self.rfile.read(length))
            # image and text embeddings differ slightly so cosine is < 1
            vec = [1.0, 2.0, 3.0] if body["kind"] == "image" else [1.0, 2.0, 2.5]
            payload = json_mod.dumps({"embedding": vec}).encode()
            self.send_response(200)
            self.send_header("content-type", "application/json")
            self.send_header("content-length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    server = ThreadingHTTPServer(("127.0.0.1", 0), EmbedHandler)
    thread = threading.Thread(target=lambda: server.serve_forever(poll_interval=0.05), daemon=True)
    thread.start()
    try:
        inputs = _prepare_stats_inputs(tmp_path)
        out_dir = tmp_path / "endpoint-report"
        code = main(
            [
                "stats",
                "--filtered",
                str(inputs["splits"] / "filtered.tsv"),
                "--random",
                str(inputs["splits"] / "random.tsv"),
                "--embed-endpoint",
                f"http://127.0.0.1:{server.server_address[1]}",
                "--out-dir",
                str(out_dir),
                "--timestamp",
                TS,
            ]
        )
        assert code == 0
        obj = json.loads((out_dir / "report.json").read_text())
        means = {s["split"]: s["mean_cosine"] for s in obj["alignment"]["splits"]}
        assert means["filtered"] == means["random"]  # endpoint returns fixed vectors
        assert 0.9 < means["filtered"] < 1.0
    finally:
        server.shutdown()
        server.server_close()


def test_stats_rejects_both_embedding_sources(tmp_path):
    inputs = _prepare_stats_inputs(tmp_path)
    code = main(
        _stats_argv(inputs, tmp_path / "both", ["--embed-endpoint", "http://127.0.0.1:1"])
    )
    assert code == 2


def test_review_serve_port_busy_exits_4(tmp_path, capsys):
    import socket

    manifest_path = _write_manifest(tmp_path, 3)
    journal = _annotate(tmp_path, manifest_path)
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        code = main(
            [
                "review-serve",
                "--manifest",
                str(manifest_path),
                "--journal",
                str(journal),
                "--port",
                str(port),
            ]
        )
    finally:
        blocker.close()
    assert code == 4
    assert "cannot bind" in capsys.readouterr().err


def test_review_serve_graceful_shutdown_on_signal(tmp_path):
    import signal
    import socket
    import subprocess
    import sys
    import time

    import httpx

    from corpus_sieve.annotations import AnnotationStore

    manifest_path = _write_manifest(tmp_path, 3)
    journal = _annotate(tmp_path, manifest_path, auto=False)
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "corpus_sieve.cli",
            "review-serve",
            "--manifest",
            str(manifest_path),
            "--journal",
            str(journal),
            "--port",
            str(port),
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    base = f"http://127.0.0.1:{port}"
    try:
        deadline = time.time() + 10
        while True:
            try:
                assert httpx.get(f"{base}/api/stats", timeout=1.0).status_code == 200
                break
            except httpx.HTTPError:
                if time.time() > deadline:
                    raise AssertionError("review server did not come up")
                time.sleep(0.05)
        manifest = read_manifest_file(manifest_path)
        target = manifest.records[0].id
        reply = httpx.post(
            f"{base}/api/pairs/{target}/review", json={"decision": "accept"}, timeout=2.0
        )
        assert reply.status_code == 200
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    reloaded = AnnotationStore(journal)
    assert reloaded.get(target).review_state == "accepted"
    assert len(reloaded) == 3


def test_unknown_config_key_rejected(tmp_path):
    manifest_path = _write_manifest(tmp_path, 3)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"subcommand": "annotate", "manifesto": "typo"}))
    code = main(
        [
            "annotate",
            "--config",
            str(config),
            "--manifest",
            str(manifest_path),
            "--out-dir",
            str(tmp_path / "o"),
        ]
    )
    assert code == 2


def test_run_json_contains_resolved_config(tmp_path):
    manifest_path = _write_manifest(tmp_path, 3)
    out_dir = tmp_path / "run"
    assert (
        main(
            [
                "annotate",
                "--manifest",
                str(manifest_path),
                "--out-dir",
                str(out_dir),
                "--timestamp",
                TS,
            ]
        )
        == 0
    )
    run = json.loads((out_dir / "run.json").read_text())
    assert run["subcommand"] == "annotate"
    assert run["timestamp"] == TS
    assert run["endpoint"] == "mock"
    assert run["manifest"] == str(manifest_path)
