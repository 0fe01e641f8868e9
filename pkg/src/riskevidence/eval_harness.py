"""Offline evaluation of highlight and summary outputs against gold data.

Highlights are scored BERTScore-style: tokens of the concatenated predicted
phrases are greedily aligned to their most similar gold token and vice
versa. Summaries are scored sentence by sentence with an NLI model: each
predicted sentence gets 1 minus its contradiction probability against the
gold sentences. Both similarity models sit behind small scorer interfaces so
endpoints and stubs are interchangeable.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import jsonschema
import numpy as np

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+")
_SENT_SPLIT_RE = re.compile(r"(?<=[.?!])\s+")

MODE_LABELS = {"zero-shot": "Ours w/ Zero-shot", "few-shot": "Ours w/ Few-shot"}


class ScorerError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split after ``.``, ``?`` or ``!`` followed by whitespace. No abbreviation handling."""
    return [s for s in (p.strip() for p in _SENT_SPLIT_RE.split(text.strip())) if s]


class TokenScorer(Protocol):
    name: str

    def similarity(self, pred_text: str, gold_text: str) -> tuple[list[str], list[str], np.ndarray]:
        """Tokens of both texts and a (len(pred), len(gold)) similarity matrix."""


class NLIScorer(Protocol):
    name: str

    def contradiction(self, premise: str, hypothesis: str) -> float:
        ...


class ExactMatchTokenScorer:
    """1.0 for identical lowercase word tokens, else 0.0."""

    name = "exact-match"

    def similarity(self, pred_text, gold_text):
        p, g = tokenize(pred_text), tokenize(gold_text)
        matrix = np.array([[1.0 if a == b else 0.0 for b in g] for a in p]).reshape(len(p), len(g))
        return p, g, matrix


class EmbeddingEndpointScorer:
    """Contextual token embeddings from an HTTP endpoint, compared by cosine similarity.

    Request: ``POST {base_url}{path}`` with ``{"model": ..., "inputs": [pred, gold]}``.
    Response: ``{"tokens": [[...], [...]], "embeddings": [[[...], ...], [[...], ...]]}``.
    """

    def __init__(self, base_url: str, model: str, path: str = "/embed", timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.name = f"embedding:{model}"
        self.model = model
        self.path = path
        self.client = httpx.Client(base_url=base_url, timeout=timeout, transport=transport)

    def similarity(self, pred_text, gold_text):
        try:
            resp = self.client.post(self.path, json={"model": self.model, "inputs": [pred_text, gold_text]})
            resp.raise_for_status()
            data = resp.json()
            p_tok, g_tok = data["tokens"]
            p_emb, g_emb = (np.asarray(e, dtype=float) for e in data["embeddings"])
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise ScorerError(f"embedding endpoint failed: {exc}") from exc
        if not p_tok or not g_tok:
            return list(p_tok), list(g_tok), np.zeros((len(p_tok), len(g_tok)))
        p_emb = p_emb / np.linalg.norm(p_emb, axis=1, keepdims=True)
        g_emb = g_emb / np.linalg.norm(g_emb, axis=1, keepdims=True)
        return list(p_tok), list(g_tok), np.clip(p_emb @ g_emb.T, 0.0, 1.0)

    def health(self):
        try:
            self.client.get("/health")
        except httpx.HTTPError as exc:
            return False, str(exc)
        return True, "ok"


class ConstantNLIScorer:
    name = "constant"

    def __init__(self, p: float):
        self.p = p

    def contradiction(self, premise, hypothesis):
        return self.p


class TableNLIScorer:
    """Contradiction probabilities looked up by (premise, hypothesis)."""

    name = "table"

    def __init__(self, table: Mapping[tuple[str, str], float], default: float | None = None):
        self.table = dict(table)
        self.default = default

    def contradiction(self, premise, hypothesis):
        try:
            return self.table[(premise, hypothesis)]
        except KeyError:
            if self.default is None:
                raise ScorerError(f"no NLI entry for {(premise, hypothesis)!r}") from None
            return self.default


class NLIEndpointScorer:
    """Three-way NLI classifier behind HTTP.

    Request: ``POST {base_url}{path}`` with ``{"model", "premise", "hypothesis"}``.
    Response: either ``{"entailment": p, "neutral": p, "contradiction": p}`` or a
    list of ``{"label": ..., "score": p}`` objects.
    """

    def __init__(self, base_url: str, model: str, path: str = "/nli", timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.name = f"nli:{model}"
        self.model = model
        self.path = path
        self.client = httpx.Client(base_url=base_url, timeout=timeout, transport=transport)

    def contradiction(self, premise, hypothesis):
        try:
            resp = self.client.post(self.path, json={"model": self.model, "premise": premise,
                                                     "hypothesis": hypothesis})
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ScorerError(f"NLI endpoint failed: {exc}") from exc
        if isinstance(data, list):
            data = {str(d["label"]).lower(): float(d["score"]) for d in data}
        probs = {str(k).lower(): float(v) for k, v in data.items()}
        if "contradiction" not in probs:
            raise ScorerError(f"NLI response lacks a contradiction probability: {data!r}")
        return probs["contradiction"]

    def health(self):
        try:
            self.client.get("/health")
        except httpx.HTTPError as exc:
            return False, str(exc)
        return True, "ok"


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def highlight_prf(pred: Sequence[str], gold: Sequence[str], scorer: TokenScorer) -> PRF:
    """Greedy max-similarity token alignment between concatenated pred and gold phrases."""
    pred_text = " ".join(p for p in pred if p)
    gold_text = " ".join(g for g in gold if g)
    p_tok, g_tok, sim = scorer.similarity(pred_text, gold_text)
    if not p_tok or not g_tok:
        both_empty = not p_tok and not g_tok
        v = 1.0 if both_empty else 0.0
        return PRF(v, v, v)
    sim = np.asarray(sim, dtype=float)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    return PRF(precision, recall, harmonic(precision, recall))


@dataclass(frozen=True)
class ConsistencyEntry:
    sentences: tuple[str, ...]
    sentence_scores: tuple[float, ...]
    score: float


@dataclass
class ConsistencyReport:
    entries: dict[str, ConsistencyEntry] = field(default_factory=dict)

    @property
    def mean(self) -> float | None:
        if not self.entries:
            return None
        return sum(e.score for e in self.entries.values()) / len(self.entries)


def sentence_consistency(summary: str, gold_sentences: Sequence[str], nli: NLIScorer,
                         reduction: str = "max") -> ConsistencyEntry:
    """Mean over predicted sentences of 1 - reduced contradiction probability.

    Each predicted sentence is the hypothesis against every gold sentence as
    premise; ``reduction`` ("max" or "mean") folds those probabilities.
    """
    sentences = split_sentences(summary)
    if not sentences:
        raise ValueError("summary has no sentences")
    if not gold_sentences:
        raise ValueError("gold summary has no sentences")
    if reduction not in ("max", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    scores = []
    for sent in sentences:
        probs = [float(nli.contradiction(g, sent)) for g in gold_sentences]
        folded = max(probs) if reduction == "max" else sum(probs) / len(probs)
        scores.append(min(1.0, max(0.0, 1.0 - folded)))
    return ConsistencyEntry(tuple(sentences), tuple(scores), sum(scores) / len(scores))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "highlights", "summaries", "notices", "scorers"],
    "properties": {
        "schema_version": {"const": 1},
        "notices": {"type": "array", "items": {"type": "string"}},
        "scorers": {"type": "object"},
        "highlights": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["posts", "status_counts", "highlights", "grounding_counts",
                             "grounding_failure_rate", "parse_failure_rate", "prf"],
                "properties": {
                    "posts": {"type": "integer", "minimum": 0},
                    "grounding_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "parse_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "prf": {
                        "oneOf": [
                            {"type": "null"},
                            {
                                "type": "object",
                                "required": ["precision", "recall", "f1", "posts_scored"],
                                "properties": {
                                    "precision": {"type": "number", "minimum": 0, "maximum": 1},
                                    "recall": {"type": "number", "minimum": 0, "maximum": 1},
                                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                                    "posts_scored": {"type": "integer", "minimum": 0},
                                },
                            },
                        ]
                    },
                },
            },
        },
        "summaries": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["users", "succeeded", "failed", "winner_tally", "mean_winner_score",
                             "over_length_candidates", "defaulted_scores", "consistency"],
                "properties": {
                    "users": {"type": "integer", "minimum": 0},
                    "winner_tally": {"type": "object", "additionalProperties": {"type": "integer"}},
                    "consistency": {
                        "oneOf": [
                            {"type": "null"},
                            {
                                "type": "object",
                                "required": ["mean", "users_scored", "per_user"],
                                "properties": {
                                    "mean": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                                    "users_scored": {"type": "integer", "minimum": 0},
                                },
                            },
                        ]
                    },
                },
            },
        },
    },
}


def _phrases_of(rec: dict, include_ungrounded: bool) -> list[str]:
    out = []
    for h in rec.get("highlights", []):
        if isinstance(h, str):
            out.append(h)
        elif h.get("grounding") != "ungrounded" or include_ungrounded:
            out.append(h.get("source_text") or h["phrase"])
    return out


def _highlight_section(records: Sequence[dict], gold: Mapping[str, Sequence[str]] | None,
                       scorer: TokenScorer, include_ungrounded: bool) -> dict:
    counts = {"exact": 0, "fuzzy": 0, "ungrounded": 0}
    status: dict[str, int] = {}
    for rec in records:
        status[rec.get("status", "ok")] = status.get(rec.get("status", "ok"), 0) + 1
        for h in rec.get("highlights", []):
            counts[h["grounding"]] = counts.get(h["grounding"], 0) + 1
    total = sum(counts.values())
    n = len(records)
    section = {
        "posts": n,
        "status_counts": dict(sorted(status.items())),
        "highlights": total,
        "grounding_counts": counts,
        "grounding_failure_rate": counts["ungrounded"] / total if total else 0.0,
        "parse_failure_rate": status.get("parse_failed", 0) / n if n else 0.0,
        "prf": None,
    }
    if gold is not None:
        preds = {rec["post_id"]: _phrases_of(rec, include_ungrounded) for rec in records}
        rows = [highlight_prf(preds.get(pid, []), gold[pid], scorer) for pid in sorted(gold)]
        if rows:
            p = sum(r.precision for r in rows) / len(rows)
            r = sum(r.recall for r in rows) / len(rows)
            section["prf"] = {"precision": p, "recall": r, "f1": harmonic(p, r), "posts_scored": len(rows)}
    return section


def _summary_section(records: Sequence[dict], gold: Mapping[str, str] | None, nli: NLIScorer | None,
                     reduction: str) -> dict:
    ok = [r for r in records if r.get("status") == "ok"]
    tally: dict[str, int] = {}
    for r in ok:
        tally[r["winner_summarizer"]] = tally.get(r["winner_summarizer"], 0) + 1
    cands = [c for r in ok for c in r.get("candidates", [])]
    section = {
        "users": len(records),
        "succeeded": len(ok),
        "failed": len(records) - len(ok),
        "winner_tally": dict(sorted(tally.items())),
        "mean_winner_score": sum(r["winner_score"] for r in ok) / len(ok) if ok else None,
        "over_length_candidates": sum(bool(c.get("over_length")) for c in cands),
        "defaulted_scores": sum(c.get("parse_status") == "defaulted" for c in cands),
        "consistency": None,
    }
    if gold is not None and nli is not None:
        report = ConsistencyReport()
        by_user = {r["user_id"]: r for r in ok}
        for uid in sorted(gold):
            rec = by_user.get(uid)
            gold_sents = split_sentences(gold[uid])
            if rec is None or not rec.get("winner_text") or not gold_sents:
                continue
            report.entries[uid] = sentence_consistency(rec["winner_text"], gold_sents, nli, reduction)
        section["consistency"] = {
            "mean": report.mean,
            "users_scored": len(report.entries),
            "per_user": {u: e.score for u, e in report.entries.items()},
        }
    return section


def _mode_order(item) -> tuple:
    mode = item[0]
    return (list(MODE_LABELS).index(mode) if mode in MODE_LABELS else len(MODE_LABELS), mode)


def aggregate_report(
    highlight_runs: Mapping[str, Sequence[dict]],
    summary_pools: Mapping[str, Sequence[dict]],
    gold_highlights: Mapping[str, Sequence[str]] | None = None,
    gold_summaries: Mapping[str, str] | None = None,
    token_scorer: TokenScorer | None = None,
    nli_scorer: NLIScorer | None = None,
    reduction: str = "max",
    include_ungrounded: bool = False,
) -> dict:
    """Schema-validated report document over pipeline output records."""
    token_scorer = token_scorer or ExactMatchTokenScorer()
    notices = []
    if gold_highlights is None:
        notices.append("no gold data for highlights: precision/recall/F1 omitted")
    if gold_summaries is None:
        notices.append("no gold data for summaries: consistency omitted")
    elif nli_scorer is None:
        notices.append("no NLI scorer configured: consistency omitted")
    doc = {
        "schema_version": 1,
        "scorers": {
            "token": token_scorer.name,
            "nli": nli_scorer.name if nli_scorer is not None else None,
            "consistency_reduction": reduction,
        },
        "highlights": {
            mode: _highlight_section(recs, gold_highlights, token_scorer, include_ungrounded)
            for mode, recs in sorted(highlight_runs.items(), key=_mode_order)
        },
        "summaries": {
            pool: _summary_section(recs, gold_summaries, nli_scorer, reduction)
            for pool, recs in sorted(summary_pools.items())
        },
        "notices": notices,
    }
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


def _fmt(x: float | None, digits: int = 3) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def highlight_rows(doc: dict) -> list[tuple[str, float | None, float | None, float | None]]:
    rows = []
    for mode, sec in doc["highlights"].items():
        prf = sec["prf"] or {}
        rows.append((MODE_LABELS.get(mode, mode), prf.get("precision"), prf.get("recall"), prf.get("f1")))
    return rows


def render_report_text(doc: dict) -> str:
    out = []
    out.append("Highlights")
    out.append(f"{'Model':<24}{'Pre.':>8}{'Rec.':>8}{'F1':>8}")
    for label, p, r, f in highlight_rows(doc):
        out.append(f"{label:<24}{_fmt(p):>8}{_fmt(r):>8}{_fmt(f):>8}")
    out.append("")
    out.append("Summarization")
    out.append(f"{'Summarizer':<32}{'Consistency':>12}")
    for pool, sec in doc["summaries"].items():
        cons = sec["consistency"]["mean"] if sec["consistency"] else None
        out.append(f"{pool:<32}{_fmt(cons):>12}")
    out.append("")
    out.append("Pipeline statistics")
    for mode, sec in doc["highlights"].items():
        out.append(
            f"  highlights[{mode}]: posts={sec['posts']} highlights={sec['highlights']} "
            f"grounding_failure_rate={sec['grounding_failure_rate']:.3f} "
            f"parse_failure_rate={sec['parse_failure_rate']:.3f}"
        )
    for pool, sec in doc["summaries"].items():
        tally = ", ".join(f"{k}={v}" for k, v in sec["winner_tally"].items()) or "none"
        out.append(
            f"  summaries[{pool}]: users={sec['users']} succeeded={sec['succeeded']} "
            f"failed={sec['failed']} mean_winner_score={_fmt(sec['mean_winner_score'], 2)} "
            f"winners: {tally}"
        )
    if doc["notices"]:
        out.append("")
        out.append("Notices")
        out.extend(f"  - {n}" for n in doc["notices"])
    return "\n".join(out) + "\n"


def write_report(doc: dict, out_dir: str | Path, figures: bool = True) -> list[Path]:
    """report.txt, report.json, tab-separated tables and (optionally) PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    put("report.txt", render_report_text(doc))
    put("report.json", json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    lines = ["model\tprecision\trecall\tf1"]
    for label, p, r, f in highlight_rows(doc):
        lines.append("\t".join([label, _fmt(p, 6), _fmt(r, 6), _fmt(f, 6)]))
    put("highlight_prf.tsv", "\n".join(lines) + "\n")
    lines = ["pool\tusers\tsucceeded\tmean_winner_score\tconsistency"]
    for pool, sec in doc["summaries"].items():
        cons = sec["consistency"]["mean"] if sec["consistency"] else None
        lines.append("\t".join([pool, str(sec["users"]), str(sec["succeeded"]),
                                _fmt(sec["mean_winner_score"], 6), _fmt(cons, 6)]))
    put("consistency.tsv", "\n".join(lines) + "\n")
    lines = ["pool\tsummarizer\twins"]
    for pool, sec in doc["summaries"].items():
        for name, n in sec["winner_tally"].items():
            lines.append(f"{pool}\t{name}\t{n}")
    put("winner_tally.tsv", "\n".join(lines) + "\n")

    if figures:
        from . import plotting

        fig_dir = out_dir / "figures"
        tallies = {pool: sec["winner_tally"] for pool, sec in doc["summaries"].items()}
        if any(tallies.values()):
            written.append(plotting.winner_counts_figure(tallies, fig_dir / "winner_counts.png"))
        rows = [r for r in highlight_rows(doc) if r[1] is not None]
        if rows:
            written.append(plotting.highlight_prf_figure(rows, fig_dir / "highlight_prf.png"))
    return written
