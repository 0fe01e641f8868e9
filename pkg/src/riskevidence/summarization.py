"""Evidence summarization: candidates from one or more summarizers, judged pointwise.

Each user's posts and grounded highlights go into the summarization prompt;
every summarizer backend produces ``k`` candidates with distinct seeds. The
evaluator backend scores each candidate from 1 to 10 and the top score wins.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import RiskLabel, UserTimeline
from .extraction import HighlightSet
from .llm_gateway import CompletionRequest, Gateway, derive_seed
from .promptkit import (
    DEFAULT_IDENTITY,
    EvaluatorContext,
    RenderedPrompt,
    SummarizationContext,
    TemplateSet,
    default_templates,
)

logger = logging.getLogger(__name__)

PARSED = "parsed"
DEFAULTED = "defaulted"
DEFAULT_SCORE = 1
MIN_SCORE, MAX_SCORE = 1, 10

# a decimal such as "7.5" is not a score
_SCORE_RE = re.compile(r"the\s+score\s+is\s*:?\s*\[?\s*(\d+)(?!\d|[.,]\d)", re.IGNORECASE)


class ScoreParseError(ValueError):
    pass


def letter_count(text: str) -> int:
    """Unicode characters, spaces included."""
    return len(text)


@dataclass(frozen=True)
class SummaryCandidate:
    candidate_id: str
    user_id: str
    text: str
    summarizer: str
    seed: int
    letter_count: int
    over_length: bool = False
    reprompted: bool = False

    def __post_init__(self):
        if self.letter_count != len(self.text):
            raise ValueError("letter_count must equal the character count of text")


@dataclass(frozen=True)
class ScoredSummary:
    candidate: SummaryCandidate
    score: int
    evaluator_raw: str | None
    parse_status: str
    error: str | None = None

    def __post_init__(self):
        if not MIN_SCORE <= self.score <= MAX_SCORE:
            raise ValueError(f"score {self.score} outside [{MIN_SCORE}, {MAX_SCORE}]")


@dataclass(frozen=True)
class SummarySelection:
    user_id: str
    winner: ScoredSummary
    all_scored: tuple[ScoredSummary, ...]
    tie_break_applied: bool


@dataclass
class UserSummaryOutcome:
    """Selection plus bookkeeping for one user; ``selection`` is None on failure."""

    user_id: str
    label: RiskLabel
    selection: SummarySelection | None
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.selection is not None

    def to_record(self) -> dict:
        sel = self.selection
        scored = sel.all_scored if sel else ()
        return {
            "user_id": self.user_id,
            "label": self.label.slug,
            "status": "ok" if sel else "failed",
            "winner_text": sel.winner.candidate.text if sel else None,
            "winner_summarizer": sel.winner.candidate.summarizer if sel else None,
            "winner_score": sel.winner.score if sel else None,
            "winner_candidate_id": sel.winner.candidate.candidate_id if sel else None,
            "tie_break_applied": sel.tie_break_applied if sel else False,
            "candidates": [
                {
                    "candidate_id": s.candidate.candidate_id,
                    "summarizer": s.candidate.summarizer,
                    "seed": s.candidate.seed,
                    "text": s.candidate.text,
                    "letter_count": s.candidate.letter_count,
                    "over_length": s.candidate.over_length,
                    "reprompted": s.candidate.reprompted,
                    "score": s.score,
                    "parse_status": s.parse_status,
                    "evaluator_raw": s.evaluator_raw,
                    "error": s.error,
                }
                for s in scored
            ],
            "failures": self.failures,
        }


@dataclass(frozen=True)
class SummarizationConfig:
    summarizers: tuple[str, ...]
    evaluator: str
    k: int = 3
    length_limit: int = 300
    expert_identity: str = DEFAULT_IDENTITY
    templates: TemplateSet | None = None
    run_seed: int = 0
    max_in_flight: int = 4
    include_ungrounded: bool = False

    def __post_init__(self):
        if not self.summarizers:
            raise ValueError("at least one summarizer backend is required")
        if len(set(self.summarizers)) != len(self.summarizers):
            raise ValueError("summarizer names must be unique")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.length_limit <= 0:
            raise ValueError("length_limit must be positive")


def parse_score(raw: str | None) -> int:
    """The N of the first ``The score is [N]`` in ``raw``; brackets optional."""
    if not raw:
        raise ScoreParseError("empty evaluator output")
    m = _SCORE_RE.search(raw)
    if m is None:
        raise ScoreParseError("no 'The score is [N]' pattern")
    value = int(m.group(1))
    if not MIN_SCORE <= value <= MAX_SCORE:
        raise ScoreParseError(f"score {value} outside [{MIN_SCORE}, {MAX_SCORE}]")
    return value


def _try_parse(raw: str | None) -> int | None:
    try:
        return parse_score(raw)
    except ScoreParseError:
        return None


def tie_key(s: ScoredSummary) -> tuple:
    return (s.candidate.summarizer, s.candidate.seed, s.candidate.candidate_id)


def select_best(scored: Sequence[ScoredSummary]) -> SummarySelection:
    """Top score wins; ties go to the smallest (summarizer name, seed)."""
    if not scored:
        raise ValueError("select_best needs at least one candidate")
    top = max(s.score for s in scored)
    leaders = [s for s in scored if s.score == top]
    winner = min(leaders, key=tie_key)
    return SummarySelection(winner.candidate.user_id, winner, tuple(scored), len(leaders) > 1)


def winner_counts(selections: Iterable[SummarySelection | UserSummaryOutcome],
                  backends: Sequence[str] = ()) -> dict[str, int]:
    """Winning candidates per summarizer backend; failed users are not counted."""
    tally = Counter({b: 0 for b in backends})
    for item in selections:
        sel = item.selection if isinstance(item, UserSummaryOutcome) else item
        if sel is not None:
            tally[sel.winner.candidate.summarizer] += 1
    return dict(sorted(tally.items()))


def grounded_context(
    timeline: UserTimeline,
    highlight_sets: Mapping[str, HighlightSet],
    length_limit: int,
    expert_identity: str = DEFAULT_IDENTITY,
    include_ungrounded: bool = False,
) -> SummarizationContext:
    pairs = []
    for post in timeline.posts:
        hs = highlight_sets.get(post.post_id)
        phrases = hs.source_phrases(post.text, include_ungrounded) if hs else []
        pairs.append((post.text, tuple(phrases)))
    return SummarizationContext(timeline.label, tuple(pairs), length_limit, expert_identity)


def candidate_seeds(run_seed: int, user_id: str, summarizers: Sequence[str], k: int) -> dict[tuple[str, int], int]:
    """Per-candidate seeds, distinct within a user."""
    seeds: dict[tuple[str, int], int] = {}
    used = set()
    for name in summarizers:
        for j in range(k):
            seed = derive_seed(run_seed, "summarize", user_id, name, j)
            while seed in used:
                seed = (seed + 1) & 0x7FFFFFFF
            used.add(seed)
            seeds[(name, j)] = seed
    return seeds


@dataclass
class _Slot:
    user_id: str
    summarizer: str
    index: int
    seed: int
    prompt: RenderedPrompt


def generate_all(
    timelines: Sequence[UserTimeline],
    highlight_sets: Mapping[str, HighlightSet],
    cfg: SummarizationConfig,
    gateway: Gateway,
) -> tuple[dict[str, list[SummaryCandidate]], dict[str, list[dict]]]:
    """Candidates per user plus per-user failure records."""
    templates = cfg.templates or default_templates()
    slots = []
    for tl in timelines:
        ctx = grounded_context(tl, highlight_sets, cfg.length_limit, cfg.expert_identity, cfg.include_ungrounded)
        prompt = templates.render_summarization(ctx)
        seeds = candidate_seeds(cfg.run_seed, tl.user_id, cfg.summarizers, cfg.k)
        for name in cfg.summarizers:
            for j in range(cfg.k):
                slots.append(_Slot(tl.user_id, name, j, seeds[(name, j)], prompt))

    def cid(s: _Slot) -> str:
        return f"{s.user_id}:{s.summarizer}:{s.index}"

    results = gateway.complete_batch(
        [CompletionRequest(s.prompt, s.summarizer, s.seed, f"summarize:{cid(s)}") for s in slots],
        cfg.max_in_flight,
    )
    texts: dict[int, str] = {}
    failures: dict[str, list[dict]] = {tl.user_id: [] for tl in timelines}
    for i, (slot, res) in enumerate(zip(slots, results)):
        text = (res.raw_text or "").strip() if res.ok else ""
        if not text:
            failures[slot.user_id].append({
                "stage": "generate", "candidate_id": cid(slot), "summarizer": slot.summarizer,
                "error": res.error or "empty completion",
            })
            continue
        texts[i] = text

    too_long = [i for i, t in texts.items() if letter_count(t) >= cfg.length_limit]
    reprompted = set(too_long)
    if too_long:
        shorter = gateway.complete_batch(
            [CompletionRequest(
                templates.with_reminder(slots[i].prompt, "shorten", letter_count=letter_count(texts[i]),
                                        length_limit=cfg.length_limit, summary=texts[i]),
                slots[i].summarizer, slots[i].seed, f"shorten:{cid(slots[i])}")
             for i in too_long],
            cfg.max_in_flight,
        )
        for i, res in zip(too_long, shorter):
            new = (res.raw_text or "").strip() if res.ok else ""
            if new:
                texts[i] = new
            else:
                failures[slots[i].user_id].append({
                    "stage": "shorten", "candidate_id": cid(slots[i]), "summarizer": slots[i].summarizer,
                    "error": res.error or "empty completion",
                })

    candidates: dict[str, list[SummaryCandidate]] = {tl.user_id: [] for tl in timelines}
    for i in sorted(texts):
        slot, text = slots[i], texts[i]
        n = letter_count(text)
        candidates[slot.user_id].append(SummaryCandidate(
            cid(slot), slot.user_id, text, slot.summarizer, slot.seed, n,
            over_length=n >= cfg.length_limit, reprompted=i in reprompted,
        ))
    return candidates, failures


def generate_candidates(
    timeline: UserTimeline,
    highlight_sets: Mapping[str, HighlightSet],
    label: RiskLabel,
    cfg: SummarizationConfig,
    gateway: Gateway,
) -> list[SummaryCandidate]:
    if label != timeline.label:
        raise ValueError(f"label {label} does not match timeline label {timeline.label}")
    candidates, _ = generate_all([timeline], highlight_sets, cfg, gateway)
    return candidates[timeline.user_id]


def score_all(
    items: Sequence[tuple[SummaryCandidate, RiskLabel, Sequence[str]]],
    cfg: SummarizationConfig,
    gateway: Gateway,
) -> list[ScoredSummary]:
    """Score (candidate, label, posts) triples; one re-ask on unparseable output."""
    templates = cfg.templates or default_templates()
    prompts = [templates.render_evaluator(EvaluatorContext(label, tuple(posts), c.text)) for c, label, posts in items]
    seeds = [derive_seed(cfg.run_seed, "score", c.candidate_id) for c, _, _ in items]
    first = gateway.complete_batch(
        [CompletionRequest(p, cfg.evaluator, s, f"score:{c.candidate_id}")
         for p, s, (c, _, _) in zip(prompts, seeds, items)],
        cfg.max_in_flight,
    )
    scores = [_try_parse(r.raw_text) if r.ok else None for r in first]
    reask = [i for i, (r, s) in enumerate(zip(first, scores)) if r.ok and s is None]
    second = {}
    if reask:
        again = gateway.complete_batch(
            [CompletionRequest(templates.with_reminder(prompts[i], "score"), cfg.evaluator, seeds[i],
                               f"score:{items[i][0].candidate_id}:reask") for i in reask],
            cfg.max_in_flight,
        )
        second = dict(zip(reask, again))

    out = []
    for i, ((cand, _, _), res) in enumerate(zip(items, first)):
        if not res.ok:
            out.append(ScoredSummary(cand, DEFAULT_SCORE, None, DEFAULTED, res.error))
            continue
        if scores[i] is not None:
            out.append(ScoredSummary(cand, scores[i], res.raw_text, PARSED))
            continue
        retry = second[i]
        value = _try_parse(retry.raw_text) if retry.ok else None
        if value is not None:
            out.append(ScoredSummary(cand, value, retry.raw_text, PARSED))
        else:
            raw = retry.raw_text if retry.ok else res.raw_text
            err = None if retry.ok else retry.error
            out.append(ScoredSummary(cand, DEFAULT_SCORE, raw, DEFAULTED, err or "unparseable score"))
    return out


def score_candidate(candidate: SummaryCandidate, posts: Sequence[str], label: RiskLabel,
                    cfg: SummarizationConfig, gateway: Gateway) -> ScoredSummary:
    return score_all([(candidate, label, posts)], cfg, gateway)[0]


def summarize_users(
    timelines: Sequence[UserTimeline],
    highlight_sets: Mapping[str, HighlightSet],
    cfg: SummarizationConfig,
    gateway: Gateway,
) -> list[UserSummaryOutcome]:
    """Generate, then score, then select. Scoring starts once every pool is complete."""
    candidates, failures = generate_all(timelines, highlight_sets, cfg, gateway)
    items = []
    for tl in timelines:
        posts = [p.text for p in tl.posts]
        items.extend((c, tl.label, posts) for c in candidates[tl.user_id])
    scored = score_all(items, cfg, gateway)
    by_user: dict[str, list[ScoredSummary]] = {tl.user_id: [] for tl in timelines}
    for s in scored:
        by_user[s.candidate.user_id].append(s)
        if s.parse_status == DEFAULTED:
            failures[s.candidate.user_id].append({
                "stage": "score", "candidate_id": s.candidate.candidate_id,
                "summarizer": s.candidate.summarizer, "error": s.error,
            })
    outcomes = []
    for tl in timelines:
        pool = by_user[tl.user_id]
        selection = select_best(pool) if pool else None
        if selection is None:
            logger.warning("user %s: no candidates survived generation", tl.user_id)
        outcomes.append(UserSummaryOutcome(tl.user_id, tl.label, selection, failures[tl.user_id]))
    return outcomes


def submission_view(outcomes: Iterable[UserSummaryOutcome]) -> dict[str, str | None]:
    return {o.user_id: (o.selection.winner.candidate.text if o.selection else None) for o in outcomes}


def summarization_stats(outcomes: Sequence[UserSummaryOutcome], backends: Sequence[str] = ()) -> dict:
    ok = [o for o in outcomes if o.ok]
    scored = [s for o in ok for s in o.selection.all_scored]
    return {
        "users_processed": len(outcomes),
        "users_succeeded": len(ok),
        "users_failed": len(outcomes) - len(ok),
        "candidates": len(scored),
        "over_length_candidates": sum(s.candidate.over_length for s in scored),
        "reprompted_candidates": sum(s.candidate.reprompted for s in scored),
        "defaulted_scores": sum(s.parse_status == DEFAULTED for s in scored),
        "tie_breaks": sum(o.selection.tie_break_applied for o in ok),
        "mean_winner_score": (sum(o.selection.winner.score for o in ok) / len(ok)) if ok else None,
        "winner_tally": winner_counts(outcomes, backends),
    }
