"""Rendering of the extraction, summarization and evaluator prompts.

Templates are plain text files under ``templates/<version>/`` with ``{{slot}}``
markers. Rendering is a single regex pass, so slot values that happen to
contain ``{{...}}`` are copied through literally.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import RiskLabel
from .lexicon import LexiconEntry

SLOT_RE = re.compile(r"\{\{(\w+)\}\}")

DEFAULT_VERSION = "v1"
DEFAULT_IDENTITY = "psychiatrist"
DEFAULT_FORMAT_EXAMPLE = '(e.g. "1. phrase", "2. phrase")'
NO_WORDS_MARKER = "(none found)"
NO_EVIDENCE_MARKER = "(no extracted evidence)"

TEMPLATE_IDS = ("extraction", "summarization", "evaluator")

# template file -> slots it must declare
TEMPLATE_SLOTS = {
    "extraction": {"expert_identity", "examples_block", "label", "post", "format_example", "suicide_words"},
    "extraction_example": {"label", "post", "highlights"},
    "summarization": {"expert_identity", "label", "posts_and_highlights", "length_limit"},
    "summarization_post": {"index", "post", "highlights"},
    "evaluator": {"label", "posts", "summary"},
    "evaluator_post": {"index", "post"},
    "reminder_format": set(),
    "reminder_shorten": {"letter_count", "length_limit", "summary"},
    "reminder_score": set(),
}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    template_id: str
    template_version: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FewShotExample:
    label: RiskLabel
    post_text: str
    highlights: tuple[str, ...]

    def __post_init__(self):
        if not self.highlights or any(not h.strip() for h in self.highlights):
            raise ValueError("few-shot example needs non-empty highlights")


@dataclass(frozen=True)
class ExtractionContext:
    label: RiskLabel
    post_text: str
    suicide_words: Sequence[LexiconEntry] = ()
    examples: Sequence[FewShotExample] = ()
    expert_identity: str = DEFAULT_IDENTITY
    format_example: str = DEFAULT_FORMAT_EXAMPLE

    def __post_init__(self):
        if not self.expert_identity.strip():
            raise ValueError("expert_identity must be non-empty")


@dataclass(frozen=True)
class SummarizationContext:
    label: RiskLabel
    # (post text, grounded highlight phrases) per post, in timeline order
    posts_and_highlights: Sequence[tuple[str, Sequence[str]]]
    length_limit_letters: int = 300
    expert_identity: str = DEFAULT_IDENTITY

    def __post_init__(self):
        if not self.posts_and_highlights:
            raise ValueError("summarization needs at least one post")
        if self.length_limit_letters <= 0:
            raise ValueError("length_limit_letters must be positive")


@dataclass(frozen=True)
class EvaluatorContext:
    label: RiskLabel
    posts: Sequence[str]
    summary: str

    def __post_init__(self):
        if not self.summary.strip():
            raise ValueError("summary must be non-empty")


def fill(template: str, slots: dict[str, object]) -> str:
    """Substitute ``{{name}}`` markers in one pass; a missing slot is an error."""

    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in slots:
            raise PromptError(f"unresolved slot {{{{{name}}}}}")
        return str(slots[name])

    return SLOT_RE.sub(repl, template)


def numbered(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, start=1))


def format_word_list(words: Sequence[LexiconEntry]) -> str:
    if not words:
        return NO_WORDS_MARKER
    return ", ".join(w.annotated() for w in words)


@dataclass
class TemplateSet:
    """The template files of one version, loaded eagerly."""

    version: str = DEFAULT_VERSION
    directory: Path | None = None
    _texts: dict[str, str] = field(default_factory=dict, repr=False)
    fingerprint: str = field(init=False, default="")

    def __post_init__(self):
        if self.directory is None:
            root = resources.files("riskevidence") / "templates" / self.version
        else:
            root = Path(self.directory) / self.version
        for name in TEMPLATE_SLOTS:
            try:
                self._texts[name] = root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
            except (OSError, FileNotFoundError) as exc:
                raise PromptError(f"missing template {name!r} in {root}: {exc}") from exc
        digest = hashlib.sha256()
        for name in sorted(self._texts):
            digest.update(name.encode() + b"\0" + self._texts[name].encode("utf-8") + b"\0")
        self.fingerprint = digest.hexdigest()[:12]

    @property
    def template_version(self) -> str:
        return f"{self.version}@{self.fingerprint}"

    def raw(self, name: str) -> str:
        return self._texts[name]

    def check(self) -> list[str]:
        """Slot-compatibility problems between template files and the renderer."""
        problems = []
        for name, expected in TEMPLATE_SLOTS.items():
            found = set(SLOT_RE.findall(self._texts[name]))
            if found - expected:
                problems.append(f"{name}: unknown slots {sorted(found - expected)}")
            if expected - found:
                problems.append(f"{name}: missing slots {sorted(expected - found)}")
        return problems

    def _main(self, name: str, slots: dict) -> RenderedPrompt:
        text = fill(self._texts[name], slots)
        if text.endswith("\n"):
            text = text[:-1]
        return RenderedPrompt(text, name, self.template_version)

    def render_extraction(self, ctx: ExtractionContext) -> RenderedPrompt:
        if ctx.examples:
            blocks = "".join(
                fill(self._texts["extraction_example"], {
                    "label": ex.label.value,
                    "post": ex.post_text,
                    "highlights": numbered(ex.highlights),
                })
                for ex in ctx.examples
            )
            examples_block = "<Examples>\n\n" + blocks
        else:
            examples_block = ""
        return self._main("extraction", {
            "expert_identity": ctx.expert_identity,
            "examples_block": examples_block,
            "label": ctx.label.value,
            "post": ctx.post_text,
            "format_example": ctx.format_example,
            "suicide_words": format_word_list(ctx.suicide_words),
        })

    def render_summarization(self, ctx: SummarizationContext) -> RenderedPrompt:
        blocks = []
        for i, (post, highlights) in enumerate(ctx.posts_and_highlights, start=1):
            blocks.append(fill(self._texts["summarization_post"], {
                "index": i,
                "post": post,
                "highlights": numbered(highlights) if highlights else NO_EVIDENCE_MARKER,
            }))
        return self._main("summarization", {
            "expert_identity": ctx.expert_identity,
            "label": ctx.label.value,
            "posts_and_highlights": "".join(blocks),
            "length_limit": ctx.length_limit_letters,
        })

    def render_evaluator(self, ctx: EvaluatorContext) -> RenderedPrompt:
        posts = "".join(
            fill(self._texts["evaluator_post"], {"index": i, "post": p})
            for i, p in enumerate(ctx.posts, start=1)
        )
        return self._main("evaluator", {"label": ctx.label.value, "posts": posts, "summary": ctx.summary})

    def with_reminder(self, prompt: RenderedPrompt, kind: str, **slots) -> RenderedPrompt:
        """A fresh prompt: the original text followed by a format/shortening/score reminder."""
        reminder = fill(self._texts[f"reminder_{kind}"], slots).rstrip("\n")
        return RenderedPrompt(prompt.text + "\n\n" + reminder, prompt.template_id, prompt.template_version)


_default: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _default
    if _default is None:
        _default = TemplateSet()
    return _default


def render_extraction_prompt(ctx: ExtractionContext, templates: TemplateSet | None = None) -> RenderedPrompt:
    return (templates or default_templates()).render_extraction(ctx)


def render_summarization_prompt(ctx: SummarizationContext, templates: TemplateSet | None = None) -> RenderedPrompt:
    return (templates or default_templates()).render_summarization(ctx)


def render_evaluator_prompt(ctx: EvaluatorContext, templates: TemplateSet | None = None) -> RenderedPrompt:
    return (templates or default_templates()).render_evaluator(ctx)
