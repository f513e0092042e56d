"""Statistics report: one dataclass, two renderings.

The JSON rendering is the machine contract; the Markdown rendering mirrors
the table shapes used in the write-ups this tool supports (split means,
t/p display, perplexity per split, preference rate, transposed bucket
table). Both are deterministic so reports can be golden-tested byte for
byte.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .stats import AlignmentResult, BucketRow, PerplexityResult, PreferenceResult, TTestResult

SPLIT_ORDER = ("full", "random", "filtered")

PERPLEXITY_AGGREGATION_NOTE = (
    "token-weighted corpus perplexity (primary); "
    "unweighted mean of per-caption perplexities (secondary)"
)


@dataclass
class StatsReport:
    alignment: dict[str, AlignmentResult] = field(default_factory=dict)
    significance: TTestResult | None = None
    welch: TTestResult | None = None
    perplexity: dict[str, PerplexityResult] = field(default_factory=dict)
    preference: PreferenceResult | None = None
    raw_slot_a_rate: float | None = None
    buckets: list[BucketRow] | None = None
    meta: dict = field(default_factory=dict)


def format_p(p: float, log10_p: float | None = None) -> str:
    """Scientific mantissa for small p; reconstruct from log10 on underflow."""
    if p == 0.0:
        if log10_p is not None and math.isfinite(log10_p):
            exponent = math.floor(log10_p)
            mantissa = 10.0 ** (log10_p - exponent)
            if mantissa >= 9.995:
                mantissa /= 10.0
                exponent += 1
            return f"{mantissa:.2f}e{exponent}"
        return "0"
    if p >= 1e-3:
        return f"{p:.4g}"
    return f"{p:.2e}"


def _fmt_mean(value: float | None, digits: int = 3) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _fmt_df(df: float) -> str:
    return str(int(df)) if df == int(df) else f"{df:.2f}"


def _split_items(mapping: dict, order: tuple[str, ...] = SPLIT_ORDER) -> list[tuple[str, object]]:
    named = [(name, mapping[name]) for name in order if name in mapping]
    extras = [(name, value) for name, value in mapping.items() if name not in order]
    return named + extras


def render_markdown(report: StatsReport) -> str:
    lines: list[str] = ["# Corpus statistics report", ""]
    for key in sorted(report.meta):
        lines.append(f"- {key}: {report.meta[key]}")
    if report.meta:
        lines.append("")

    if report.alignment:
        lines += ["## Image-caption alignment", ""]
        lines += ["| Split | Pairs | Mean cosine |", "| --- | ---: | ---: |"]
        for name, result in _split_items(report.alignment):
            lines.append(f"| {name} | {result.n:,} | {_fmt_mean(result.mean)} |")
        lines.append("")
        if report.significance is not None:
            r = report.significance
            lines.append(
                "Filtered vs random, one-sided two-sample t-test (pooled variance):"
            )
            lines.append("")
            lines.append(
                f"t = {r.t:.2f}, p = {format_p(r.p_one_sided, r.log10_p_one_sided)} "
                f"(df = {_fmt_df(r.df)}, two-sided p = {format_p(r.p_two_sided)})"
            )
            lines.append("")
        if report.welch is not None:
            w = report.welch
            lines.append(
                f"Welch variant: t = {w.t:.2f}, "
                f"p = {format_p(w.p_one_sided, w.log10_p_one_sided)} (df = {_fmt_df(w.df)})"
            )
            lines.append("")

    if report.perplexity:
        lines += ["## Caption perplexity", ""]
        lines += [
            "| Split | Corpus PPL | Mean caption PPL | Tokens | Captions |",
            "| --- | ---: | ---: | ---: | ---: |",
        ]
        for name, result in _split_items(report.perplexity):
            lines.append(
                f"| {name} | {result.corpus_ppl:.1f} | {result.mean_caption_ppl:.1f} "
                f"| {result.tokens:,} | {result.captions:,} |"
            )
        lines.append("")
        lines.append(f"Aggregation: {PERPLEXITY_AGGREGATION_NOTE}.")
        lines.append("")

    if report.preference is not None:
        p = report.preference
        lines += ["## Judge preference", ""]
        lines.append(
            f"Filtered model preferred in {p.rate * 100:.1f}% of cases ({p.wins}/{p.total})."
        )
        lines.append(
            f"Wilson 95% interval: [{p.wilson_lo:.3f}, {p.wilson_hi:.3f}]. "
            f"Wins {p.wins}, losses {p.losses}, ties {p.ties}."
        )
        if report.raw_slot_a_rate is not None:
            lines.append(
                f"Raw slot-A rate before de-biasing: {report.raw_slot_a_rate * 100:.1f}%."
            )
        lines.append("")

    if report.buckets is not None:
        lines += ["## Alignment by score bucket", ""]
        header = "| Score Range | " + " | ".join(row.label for row in report.buckets) + " |"
        rule = "| --- |" + " ---: |" * len(report.buckets)
        counts = "| Number of Samples | " + " | ".join(
            f"{row.n:,}" for row in report.buckets
        ) + " |"
        means = "| Alignment Score | " + " | ".join(
            _fmt_mean(row.mean_cosine, digits=2) for row in report.buckets
        ) + " |"
        lines += [header, rule, counts, means, ""]

    return "\n".join(lines).rstrip("\n") + "\n"


def _alignment_obj(name: str, result: AlignmentResult) -> dict:
    return {
        "split": name,
        "n": result.n,
        "failed": len(result.failed),
        "mean_cosine": result.mean,
    }


def _ttest_obj(result: TTestResult) -> dict:
    def _num(value: float) -> float | str:
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value

    return {
        "variant": result.variant,
        "t": _num(result.t),
        "df": result.df,
        "p_one_sided": result.p_one_sided,
        "p_two_sided": result.p_two_sided,
        "log10_p_one_sided": _num(result.log10_p_one_sided),
        "mean_a": result.mean_a,
        "mean_b": result.mean_b,
        "n_a": result.n_a,
        "n_b": result.n_b,
    }


def report_to_obj(report: StatsReport) -> dict:
    obj: dict = {"meta": dict(report.meta)}
    if report.alignment:
        obj["alignment"] = {
            "splits": [_alignment_obj(n, r) for n, r in _split_items(report.alignment)],
            "significance": _ttest_obj(report.significance) if report.significance else None,
            "welch": _ttest_obj(report.welch) if report.welch else None,
        }
    if report.perplexity:
        obj["perplexity"] = {
            "splits": [
                {
                    "split": name,
                    "corpus_ppl": result.corpus_ppl,
                    "mean_caption_ppl": result.mean_caption_ppl,
                    "tokens": result.tokens,
                    "captions": result.captions,
                }
                for name, result in _split_items(report.perplexity)
            ],
            "aggregation": PERPLEXITY_AGGREGATION_NOTE,
        }
    if report.preference is not None:
        p = report.preference
        obj["preference"] = {
            "wins": p.wins,
            "losses": p.losses,
            "ties": p.ties,
            "total": p.total,
            "rate": p.rate,
            "wilson_lo": p.wilson_lo,
            "wilson_hi": p.wilson_hi,
            "z": 1.96,
            "raw_slot_a_rate": report.raw_slot_a_rate,
        }
    if report.buckets is not None:
        obj["buckets"] = {
            "rows": [
                {
                    "range": row.label,
                    "n": row.n,
                    "mean_cosine": row.mean_cosine,
                    "failed": row.failed,
                }
                for row in report.buckets
            ]
        }
    return obj


def render_json(report: StatsReport) -> str:
    return json.dumps(report_to_obj(report), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
