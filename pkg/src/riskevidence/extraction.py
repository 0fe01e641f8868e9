"""Highlight extraction: prompt, parse the numbered list, ground each phrase in the post."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from rapidfuzz.distance import Levenshtein

from .corpus import Post, RiskLabel
from .lexicon import Lexicon, match_terms, terms_for_prompt
from .llm_gateway import CompletionRequest, Gateway, derive_seed
from .promptkit import (
    DEFAULT_IDENTITY,
    ExtractionContext,
    FewShotExample,
    TemplateSet,
    default_templates,
)

logger = logging.getLogger(__name__)

EXACT = "exact"
FUZZY = "fuzzy"
UNGROUNDED = "ungrounded"

STATUS_OK = "ok"
STATUS_PARSE_FAILED = "parse_failed"
STATUS_FAILED = "failed"

# fuzzy windows span this fraction of the phrase length on either side
WINDOW_SLACK = 0.2

_ITEM_RE = re.compile(r"^\s*(?:[-*]\s*)?\(?(\d{1,3})\s*[.)]\s*(.*?)\s*$")
_PAIRS = {'"': '"', "'": "'", "“": "”", "‘": "’", "`": "`", "[": "]", "(": ")", "**": "**"}


@dataclass(frozen=True)
class Highlight:
    phrase: str
    grounding: str
    span: tuple[int, int] | None = None
    similarity: float | None = None

    def __post_init__(self):
        if self.grounding == UNGROUNDED and self.span is not None:
            raise ValueError("ungrounded highlight cannot carry a span")
        if self.grounding in (EXACT, FUZZY) and self.span is None:
            raise ValueError(f"{self.grounding} highlight needs a span")

    @property
    def grounded(self) -> bool:
        return self.grounding != UNGROUNDED

    def to_record(self) -> dict:
        return {
            "phrase": self.phrase,
            "grounding": self.grounding,
            "span": list(self.span) if self.span else None,
            "similarity": self.similarity,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Highlight":
        span = tuple(rec["span"]) if rec.get("span") else None
        return cls(rec["phrase"], rec["grounding"], span, rec.get("similarity"))


@dataclass
class HighlightSet:
    post_id: str
    highlights: list[Highlight]
    raw_completion: str | None
    status: str = STATUS_OK
    provenance: dict = field(default_factory=dict)

    def source_phrases(self, post_text: str | None = None, include_ungrounded: bool = False) -> list[str]:
        """Phrases for downstream use: the post's own text for grounded spans."""
        out = []
        for h in self.highlights:
            if h.grounded:
                if post_text is not None and h.grounding == FUZZY:
                    out.append(" ".join(post_text[h.span[0]:h.span[1]].split()))
                else:
                    out.append(h.phrase)
            elif include_ungrounded:
                out.append(h.phrase)
        return out

    def to_record(self, post_text: str | None = None) -> dict:
        highlights = []
        for h in self.highlights:
            rec = h.to_record()
            if post_text is not None and h.grounded:
                rec["source_text"] = normalize_ws(post_text[h.span[0]:h.span[1]])
            highlights.append(rec)
        return {
            "post_id": self.post_id,
            "status": self.status,
            "highlights": highlights,
            "raw_completion": self.raw_completion,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HighlightSet":
        return cls(
            rec["post_id"],
            [Highlight.from_record(h) for h in rec.get("highlights", [])],
            rec.get("raw_completion"),
            rec.get("status", STATUS_OK),
            rec.get("provenance", {}),
        )


@dataclass(frozen=True)
class ExtractionConfig:
    backend: str
    expert_identity: str = DEFAULT_IDENTITY
    fuzzy_threshold: float = 0.9
    templates: TemplateSet | None = None
    run_seed: int = 0
    max_in_flight: int = 4

    def __post_init__(self):
        if not 0 < self.fuzzy_threshold <= 1:
            raise ValueError("fuzzy_threshold must be in (0, 1]")


def _strip_wrappers(text: str) -> str:
    while True:
        text = text.strip()
        for opener, closer in _PAIRS.items():
            n = len(opener)
            if len(text) >= 2 * n and text.startswith(opener) and text.endswith(closer):
                text = text[n:-len(closer)]
                break
        else:
            return text


def _expand_item(body: str) -> list[str]:
    body = body.strip()
    if body.startswith("[") and body.endswith("]"):
        try:
            items = json.loads(body)
        except ValueError:
            items = None
        if isinstance(items, list) and items and all(isinstance(i, str) for i in items):
            return [p for p in (_strip_wrappers(i) for i in items) if p]
    phrase = _strip_wrappers(body)
    return [phrase] if phrase else []


def parse_highlight_list(raw: str | None) -> list[str]:
    """Phrases from ``1. text`` / ``1) text`` lines, in order; other lines are ignored.

    A numbered line holding a JSON list of strings contributes each string.
    """
    if not raw:
        return []
    phrases = []
    for line in raw.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            phrases.extend(_expand_item(m.group(2)))
    return phrases


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _normalized_with_map(text: str) -> tuple[str, list[int]]:
    """Whitespace-collapsed, trimmed text plus the original index of each kept char."""
    chars: list[str] = []
    index: list[int] = []
    pending_space = False
    for i, ch in enumerate(text):
        if ch.isspace():
            pending_space = bool(chars)
            continue
        if pending_space:
            chars.append(" ")
            index.append(i - 1)
            pending_space = False
        chars.append(ch)
        index.append(i)
    return "".join(chars), index


def _trigrams(text: str) -> set[str]:
    return {text[i:i + 3] for i in range(len(text) - 2)}


def window_lengths(n: int) -> range:
    lo = max(1, math.floor(n * (1 - WINDOW_SLACK)))
    hi = math.ceil(n * (1 + WINDOW_SLACK))
    return range(lo, hi + 1)


def best_window(phrase: str, text: str) -> tuple[float, int, int]:
    """Highest normalized edit similarity of ``phrase`` to any window of ``text``.

    Windows have lengths within +/-20% of the phrase length. Ties go to the
    earliest start, then the shortest window. Returns (similarity, start, end)
    in ``text`` coordinates; (0.0, 0, 0) if no window exists.
    """
    best = (0.0, 0, 0)
    lengths = window_lengths(len(phrase))
    sim = Levenshtein.normalized_similarity
    for start in range(len(text)):
        for length in lengths:
            end = start + length
            if end > len(text):
                break
            s = sim(phrase, text[start:end], score_cutoff=best[0])
            if s > best[0]:
                best = (s, start, end)
    return best


def ground_phrase(phrase: str, post_text: str, threshold: float = 0.9) -> Highlight:
    """Locate ``phrase`` in the post: exact match first, then the best fuzzy window.

    Matching is on whitespace-collapsed, case-preserving text; spans are
    offsets into the original post.
    """
    target = normalize_ws(phrase)
    if not target:
        raise ValueError("phrase must be non-empty")
    norm, index = _normalized_with_map(post_text)
    pos = norm.find(target)
    if pos >= 0:
        return Highlight(phrase, EXACT, (index[pos], index[pos + len(target) - 1] + 1), 1.0)
    if len(target) < 3 or not (_trigrams(target) & _trigrams(norm)):
        return Highlight(phrase, UNGROUNDED)
    sim, start, end = best_window(target, norm)
    if sim >= threshold and end > start:
        return Highlight(phrase, FUZZY, (index[start], index[end - 1] + 1), sim)
    return Highlight(phrase, UNGROUNDED)


@dataclass
class _Job:
    post: Post
    words: list
    context: ExtractionContext
    prompt: object
    attempts: list = field(default_factory=list)


def extract_all(
    posts: Sequence[Post],
    lexicon: Lexicon | None,
    examples: Sequence[FewShotExample],
    cfg: ExtractionConfig,
    gateway: Gateway,
) -> list[HighlightSet]:
    """Run extraction over many posts; output order follows ``posts``.

    Posts whose completion parses to no phrases get one re-prompt with a
    format reminder before being marked ``parse_failed``.
    """
    templates = cfg.templates or default_templates()
    jobs = []
    for post in posts:
        words = terms_for_prompt(match_terms(lexicon, post.text)) if lexicon is not None else []
        ctx = ExtractionContext(post.label, post.text, words, tuple(examples), cfg.expert_identity)
        jobs.append(_Job(post, words, ctx, templates.render_extraction(ctx)))

    first = gateway.complete_batch(
        [CompletionRequest(j.prompt, cfg.backend, derive_seed(cfg.run_seed, "extract", j.post.post_id),
                           f"extract:{j.post.post_id}") for j in jobs],
        cfg.max_in_flight,
    )
    phrases: list[list[str] | None] = []
    retry_idx = []
    for i, (job, res) in enumerate(zip(jobs, first)):
        job.attempts.append(res.attempt_count)
        if not res.ok:
            phrases.append(None)
            continue
        parsed = parse_highlight_list(res.raw_text)
        phrases.append(parsed)
        if not parsed:
            retry_idx.append(i)

    retried = {}
    if retry_idx:
        second = gateway.complete_batch(
            [CompletionRequest(templates.with_reminder(jobs[i].prompt, "format"), cfg.backend,
                               derive_seed(cfg.run_seed, "extract", jobs[i].post.post_id),
                               f"extract:{jobs[i].post.post_id}:reprompt") for i in retry_idx],
            cfg.max_in_flight,
        )
        retried = dict(zip(retry_idx, second))

    out = []
    for i, (job, res) in enumerate(zip(jobs, first)):
        provenance = {
            "template_version": templates.template_version,
            "backend": cfg.backend,
            "expert_identity": cfg.expert_identity,
            "few_shot_examples": len(examples),
            "suicide_words": [w.annotated() for w in job.words],
            "prompt_sha256": job.prompt.sha256,
            "attempts": job.attempts,
            "reprompted": i in retried,
        }
        raw = res.raw_text
        if not res.ok:
            provenance["error"] = res.error
            out.append(HighlightSet(job.post.post_id, [], None, STATUS_FAILED, provenance))
            continue
        found = phrases[i]
        if i in retried:
            again = retried[i]
            provenance["attempts"] = job.attempts + [again.attempt_count]
            if again.ok:
                raw = again.raw_text
                found = parse_highlight_list(raw)
            else:
                provenance["error"] = again.error
        if not found:
            out.append(HighlightSet(job.post.post_id, [], raw, STATUS_PARSE_FAILED, provenance))
            continue
        highlights = [ground_phrase(p, job.post.text, cfg.fuzzy_threshold) for p in found]
        out.append(HighlightSet(job.post.post_id, highlights, raw, STATUS_OK, provenance))
    return out


def extract_highlights(
    post: Post,
    label: RiskLabel,
    lexicon: Lexicon | None,
    examples: Sequence[FewShotExample],
    cfg: ExtractionConfig,
    gateway: Gateway,
) -> HighlightSet:
    if label != post.label:
        post = Post(post.post_id, post.user_id, post.timestamp, post.text, label)
    return extract_all([post], lexicon, examples, cfg, gateway)[0]


def load_few_shot(path) -> list[FewShotExample]:
    """Few-shot file: one JSON object per line with ``label``, ``post``, ``highlights``."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                examples.append(FewShotExample(RiskLabel.parse(rec["label"]), rec["post"], tuple(rec["highlights"])))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad few-shot example: {exc}") from exc
    return examples


def submission_view(
    sets: Iterable[HighlightSet], posts_by_id: dict[str, Post] | None = None, include_ungrounded: bool = False
) -> dict[str, list[str]]:
    out = {}
    for hs in sets:
        text = posts_by_id[hs.post_id].text if posts_by_id else None
        out[hs.post_id] = hs.source_phrases(text, include_ungrounded)
    return out


def extraction_stats(sets: Sequence[HighlightSet]) -> dict:
    counts = {EXACT: 0, FUZZY: 0, UNGROUNDED: 0}
    status = {STATUS_OK: 0, STATUS_PARSE_FAILED: 0, STATUS_FAILED: 0}
    for hs in sets:
        status[hs.status] = status.get(hs.status, 0) + 1
        for h in hs.highlights:
            counts[h.grounding] += 1
    total = sum(counts.values())
    n = len(sets)
    return {
        "posts_processed": n,
        "status_counts": status,
        "highlights": total,
        "grounding_counts": counts,
        "grounding_failure_rate": counts[UNGROUNDED] / total if total else 0.0,
        "parse_failure_rate": status[STATUS_PARSE_FAILED] / n if n else 0.0,
        "backend_failure_rate": status[STATUS_FAILED] / n if n else 0.0,
    }
