"""Risk-level-tagged suicide dictionary and term matching over post text."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import RiskLabel

logger = logging.getLogger(__name__)


class LexiconError(ValueError):
    pass


def normalize_term(term: str) -> str:
    return " ".join(term.split()).casefold()


@dataclass(frozen=True, order=True)
class LexiconEntry:
    term: str
    level: RiskLabel

    def __post_init__(self):
        if not self.term or self.term != normalize_term(self.term):
            raise ValueError(f"lexicon term {self.term!r} is not normalized")

    def annotated(self) -> str:
        return f"{self.term} ({self.level.slug})"


@dataclass(frozen=True)
class TermMatch:
    term: str
    level: RiskLabel
    start: int
    end: int
    surface: str

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


class Lexicon:
    """Immutable term -> level mapping with a character trie for matching."""

    def __init__(self, entries: Iterable[LexiconEntry]):
        levels: dict[str, RiskLabel] = {}
        for entry in entries:
            prev = levels.get(entry.term)
            if prev is not None and prev != entry.level:
                raise LexiconError(
                    f"term {entry.term!r} listed under both {prev.slug} and {entry.level.slug}"
                )
            levels[entry.term] = entry.level
        if not levels:
            raise LexiconError("lexicon is empty")
        self._levels = levels
        self._trie: dict = {}
        for term in levels:
            node = self._trie
            for ch in term:
                node = node.setdefault(ch, {})
            node[None] = term

    @property
    def entries(self) -> frozenset[LexiconEntry]:
        return frozenset(LexiconEntry(t, l) for t, l in self._levels.items())

    def level_of(self, term: str) -> RiskLabel | None:
        return self._levels.get(normalize_term(term))

    def counts(self) -> dict[RiskLabel, int]:
        out = {label: 0 for label in RiskLabel}
        for level in self._levels.values():
            out[level] += 1
        return out

    def __len__(self) -> int:
        return len(self._levels)

    def __contains__(self, term: str) -> bool:
        return normalize_term(term) in self._levels

    def __repr__(self) -> str:
        counts = ", ".join(f"{l.slug}={n}" for l, n in self.counts().items())
        return f"Lexicon({counts})"


def parse_lexicon(lines: Iterable[str], source: str = "<lexicon>") -> Lexicon:
    entries = []
    header_allowed = True
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        term, sep, level = stripped.rpartition(",")
        if not sep:
            raise LexiconError(f"{source}:{line_no}: expected 'term,level', got {stripped!r}")
        if header_allowed:
            header_allowed = False
            if normalize_term(term) == "term" and level.strip().lower() == "level":
                continue
        term = normalize_term(term)
        if not term:
            raise LexiconError(f"{source}:{line_no}: empty term")
        try:
            label = RiskLabel.parse(level)
        except ValueError as exc:
            raise LexiconError(f"{source}:{line_no}: {exc}") from exc
        entries.append(LexiconEntry(term, label))
    return Lexicon(entries)


def load_lexicon(path: str | Path) -> Lexicon:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise LexiconError(f"cannot read lexicon {path}: {exc}") from exc
    return parse_lexicon(text.splitlines(), source=str(path))


def example_lexicon() -> Lexicon:
    """The six example words per risk level shipped as package data."""
    text = resources.files("riskevidence").joinpath("data/lexicon_examples.csv").read_text("utf-8")
    return parse_lexicon(text.splitlines(), source="lexicon_examples.csv")


def _is_boundary(text: str, pos: int) -> bool:
    """True if ``pos`` is a valid word edge: text edge, or a side is non-alphanumeric."""
    if pos <= 0 or pos >= len(text):
        return True
    return not (text[pos - 1].isalnum() and text[pos].isalnum())


def match_terms(lexicon: Lexicon, text: str) -> list[TermMatch]:
    """All word-bounded occurrences of lexicon terms, ordered by start offset.

    Matching is case-insensitive (per-character case folding; offsets stay in
    the original text). At a given start only the longest matching term is
    kept; matches at different starts may overlap.
    """
    trie = lexicon._trie
    matches = []
    n = len(text)
    for start in range(n):
        if not _is_boundary(text, start):
            continue
        node = trie
        best = None
        pos = start
        while pos < n and node:
            for ch in text[pos].casefold():
                node = node.get(ch)
                if node is None:
                    break
            if node is None:
                break
            pos += 1
            term = node.get(None)
            if term is not None and _is_boundary(text, pos):
                best = (term, pos)
        if best is not None:
            term, end = best
            matches.append(TermMatch(term, lexicon._levels[term], start, end, text[start:end]))
    return matches


def terms_for_prompt(matches: Sequence[TermMatch]) -> list[LexiconEntry]:
    """Unique matched terms in order of their earliest start offset."""
    first: dict[str, tuple[int, RiskLabel]] = {}
    for m in matches:
        if m.term not in first or m.start < first[m.term][0]:
            first[m.term] = (m.start, m.level)
    ordered = sorted(first.items(), key=lambda kv: (kv[1][0], kv[0]))
    return [LexiconEntry(term, level) for term, (_, level) in ordered]
