"""Rubric-driven prompt construction and model-output parsing.

The scorer side turns a pair record plus a rubric into a prompt payload and
parses free-text model replies into structured scores with rationales. The
judge side renders pairwise comparison prompts with seeded position
randomization and maps verdict letters back to logical models. Everything
here is pure; network concerns live in client.py.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import CorpusSieveError
from .hashing import SplitMix64, fnv1a64
from .manifest import PairRecord

ORDER_AB = "AB"
ORDER_BA = "BA"
PRESENTATION_ORDERS = (ORDER_AB, ORDER_BA)

FILTERED_WINS = "filtered_wins"
FULL_WINS = "full_wins"
TIE = "tie"
JUDGE_OUTCOMES = (FILTERED_WINS, FULL_WINS, TIE)

_PLACEHOLDERS = ("{caption}", "{criteria}", "{scale}")


class GatewayError(CorpusSieveError):
    pass


class TemplateError(GatewayError):
    pass


class UnparseableError(GatewayError):
    """Model output matched no known score or verdict form."""

    def __init__(self, raw: str, detail: str = "unparseable model output") -> None:
        super().__init__(f"{detail}: {raw[:200]!r}")
        self.raw = raw


class ScoreOutOfRangeError(GatewayError):
    def __init__(self, value: float, lo: int, hi: int) -> None:
        super().__init__(f"score {value} outside [{lo}, {hi}]")
        self.value = value


@dataclass(frozen=True)
class Criterion:
    name: str
    description: str


@dataclass(frozen=True)
class Rubric:
    """Scoring criteria, scale bounds, and the prompt template they render into."""

    criteria: tuple[Criterion, ...]
    scale_min: int = 1
    scale_max: int = 10
    prompt_template: str = ""

    def __post_init__(self) -> None:
        if not self.criteria:
            raise TemplateError("rubric needs at least one criterion")
        if self.scale_min >= self.scale_max:
            raise TemplateError("scale_min must be below scale_max")
        missing = [p for p in _PLACEHOLDERS if p not in self.prompt_template]
        if missing:
            raise TemplateError(f"prompt template missing placeholders: {', '.join(missing)}")


def rubric_from_dict(obj: dict) -> Rubric:
    criteria = tuple(
        Criterion(name=c["name"], description=c["description"]) for c in obj["criteria"]
    )
    return Rubric(
        criteria=criteria,
        scale_min=int(obj.get("scale_min", 1)),
        scale_max=int(obj.get("scale_max", 10)),
        prompt_template=obj["prompt_template"],
    )


def load_rubric(path: str | Path) -> Rubric:
    return rubric_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_rubric() -> Rubric:
    text = resources.files("corpus_sieve").joinpath("data/default_rubric.json").read_text("utf-8")
    return rubric_from_dict(json.loads(text))


def rubric_to_dict(rubric: Rubric) -> dict:
    return {
        "criteria": [{"name": c.name, "description": c.description} for c in rubric.criteria],
        "scale_min": rubric.scale_min,
        "scale_max": rubric.scale_max,
        "prompt_template": rubric.prompt_template,
    }


@dataclass(frozen=True)
class PromptPayload:
    """One text part plus at most one image part, addressed by reference."""

    text: str
    image_ref: str | None = None


@dataclass(frozen=True)
class ScorerResponse:
    score: int
    rationale: str
    raw: str
    model_id: str = ""


@dataclass(frozen=True)
class JudgeVerdict:
    winner: str  # "A" | "B" | "tie"
    raw: str
    presentation_order: str


def build_score_prompt(rec: PairRecord, rubric: Rubric) -> PromptPayload:
    """Render the rubric template for one record; deterministic, brace-safe."""
    criteria_text = "\n".join(f"- {c.name}: {c.description}" for c in rubric.criteria)
    scale_text = f"{rubric.scale_min} (lowest) to {rubric.scale_max} (highest)"
    text = rubric.prompt_template
    for placeholder in _PLACEHOLDERS:
        if placeholder not in text:
            raise TemplateError(f"prompt template missing placeholder {placeholder}")
    text = text.replace("{caption}", rec.caption)
    text = text.replace("{criteria}", criteria_text)
    text = text.replace("{scale}", scale_text)
    return PromptPayload(text=text, image_ref=rec.image_ref)


def _round_half_away(value: float) -> int:
    if value >= 0:
        return math.floor(value + 0.5)
    return math.ceil(value - 0.5)


_SCORE_LINE_RE = re.compile(r"^\s*score\s*:\s*(-?\d+(?:\.\d+)?)\s*(?:/\s*10)?\s*$", re.IGNORECASE)
_RATIONALE_RE = re.compile(r"^[ \t]*rationale\s*:[ \t]*", re.IGNORECASE | re.MULTILINE)


def _first_json_score_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            score = obj.get("score")
            if isinstance(score, (int, float)) and not isinstance(score, bool):
                return obj
        idx = text.find("{", idx + 1)
    return None


def _trailing_rationale(text: str) -> str:
    m = _RATIONALE_RE.search(text)
    if m is None:
        return ""
    return text[m.end():].strip()


def parse_scorer_output(text: str, scale_lo: int = 1, scale_hi: int = 10) -> ScorerResponse:
    """Parse a model reply into a score and rationale.

    Priority: first well-formed JSON object with a numeric "score" member,
    then a `Score: N` / `Score: N/10` line. Scores are rounded to the nearest
    integer and rejected (never clamped) outside the scale.
    """
    raw_score: float | None = None
    rationale = ""
    obj = _first_json_score_object(text)
    if obj is not None:
        raw_score = float(obj["score"])
        r = obj.get("rationale")
        rationale = r if isinstance(r, str) else _trailing_rationale(text)
    else:
        for line in text.split("\n"):
            m = _SCORE_LINE_RE.match(line)
            if m:
                raw_score = float(m.group(1))
                rationale = _trailing_rationale(text)
                break
    if raw_score is None:
        raise UnparseableError(text, "no JSON score object or Score: line")
    score = _round_half_away(raw_score)
    if score < scale_lo or score > scale_hi:
        raise ScoreOutOfRangeError(raw_score, scale_lo, scale_hi)
    return ScorerResponse(score=score, rationale=rationale, raw=text)


def mock_score(rec: PairRecord) -> int:
    """Deterministic score in [1, 10] derived from the pair id; pure."""
    return fnv1a64(rec.id) % 10 + 1


_JUDGE_TEMPLATE = """You are judging which of two candidate captions better matches a reference caption for the same image.

Reference caption:
{reference}

Caption A:
{first}

Caption B:
{second}

Compare each candidate to the reference for factual agreement and wording. Then answer on the final line with exactly one of:
Verdict: A
Verdict: B
Verdict: tie"""


def render_judge_text(reference: str, first: str, second: str) -> str:
    """Render the judge prompt with candidates already placed in slots A/B."""
    text = _JUDGE_TEMPLATE
    text = text.replace("{reference}", reference)
    text = text.replace("{first}", first)
    text = text.replace("{second}", second)
    return text


def presentation_order_for(seed: int, item_id: str) -> str:
    """Seeded coin per item: a pure function of (seed, item_id)."""
    draw = SplitMix64(seed ^ fnv1a64(item_id)).next_u64()
    return ORDER_AB if draw % 2 == 0 else ORDER_BA


@dataclass(frozen=True)
class JudgePrompt:
    item_id: str
    presentation_order: str
    payload: PromptPayload


def build_judge_prompt(
    reference: str,
    cand_filtered: str,
    cand_full: str,
    *,
    item_id: str,
    seed: int,
) -> JudgePrompt:
    """Build the pairwise prompt with seeded A/B position randomization."""
    order = presentation_order_for(seed, item_id)
    if order == ORDER_AB:
        text = render_judge_text(reference, cand_filtered, cand_full)
    else:
        text = render_judge_text(reference, cand_full, cand_filtered)
    return JudgePrompt(item_id=item_id, presentation_order=order, payload=PromptPayload(text=text))


_VERDICT_RE = re.compile(r"^\s*verdict\s*:\s*(a|b|tie)\s*\.?\s*$", re.IGNORECASE)


def parse_judge_verdict(text: str) -> str:
    """Extract the verdict letter from the last verdict line of the reply."""
    winner: str | None = None
    for line in text.split("\n"):
        m = _VERDICT_RE.match(line)
        if m:
            token = m.group(1).lower()
            winner = "tie" if token == "tie" else token.upper()
    if winner is None:
        raise UnparseableError(text, "no verdict line")
    return winner


def map_verdict(winner: str, presentation_order: str) -> str:
    """Map a positional verdict letter back to the logical model outcome."""
    if presentation_order not in PRESENTATION_ORDERS:
        raise ValueError(f"unknown presentation order {presentation_order!r}")
    if winner == "tie":
        return TIE
    if winner not in ("A", "B"):
        raise ValueError(f"unknown verdict letter {winner!r}")
    slot_a_is_filtered = presentation_order == ORDER_AB
    if winner == "A":
        return FILTERED_WINS if slot_a_is_filtered else FULL_WINS
    return FULL_WINS if slot_a_is_filtered else FILTERED_WINS


def parse_judge_output(text: str, presentation_order: str) -> str:
    """Parse a judge reply and de-bias it into filtered_wins/full_wins/tie."""
    return map_verdict(parse_judge_verdict(text), presentation_order)
