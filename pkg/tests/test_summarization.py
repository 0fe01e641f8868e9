from __future__ import annotations

import json
import random

import pytest

from conftest import FIXTURES
from riskevidence.corpus import Post, RiskLabel, UserTimeline
from riskevidence.extraction import EXACT, Highlight, HighlightSet
from riskevidence.llm_gateway import BackendConfig, Gateway, MockBackend
from riskevidence.summarization import (
    DEFAULTED,
    PARSED,
    ScoredSummary,
    ScoreParseError,
    SummarizationConfig,
    SummaryCandidate,
    SummarySelection,
    generate_candidates,
    grounded_context,
    parse_score,
    score_candidate,
    select_best,
    summarization_stats,
    summarize_users,
    winner_counts,
)


def timeline(uid="u1", label=RiskLabel.MODERATE, texts=("I feel pain every day.", "Nobody listens.")):
    posts = tuple(Post(f"{uid}-p{i}", uid, i, t, label) for i, t in enumerate(texts))
    return UserTimeline(uid, label, posts)


def gateway(*mocks: MockBackend) -> Gateway:
    return Gateway([BackendConfig(m.name, max_retries=1) for m in mocks], backends={m.name: m for m in mocks},
                   sleep=lambda s: None)


def cand(cid, summarizer="A", seed=0, text="summary", user="u1"):
    return SummaryCandidate(cid, user, text, summarizer, seed, len(text))


def scored(cid, score, summarizer="A", seed=0):
    return ScoredSummary(cand(cid, summarizer, seed), score, f"The score is [{score}]", PARSED)


# score parsing

@pytest.mark.parametrize("raw, expected", [
    ("The score is [3]", 3),
    ("The score is 10.", 10),
    ("The score is [7] because it is faithful", 7),
    ("The score is [10]", 10),
    ("the score is: [4]!", 4),
])
def test_parse_score(raw, expected):
    assert parse_score(raw) == expected


@pytest.mark.parametrize("raw", ["The score is [0]", "The score is [11]", "I think 8/10", "", None, "score [5]",
                                 "The score is [7.5]"])
def test_parse_score_failures(raw):
    with pytest.raises(ScoreParseError):
        parse_score(raw)


def load_scores():
    with open(FIXTURES / "evaluator_completions.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


@pytest.mark.parametrize("case", load_scores(), ids=lambda c: str(c["id"]))
def test_score_fixture_corpus(case):
    if case["expected"] is None:
        with pytest.raises(ScoreParseError):
            parse_score(case["completion"])
    else:
        assert parse_score(case["completion"]) == case["expected"]


def test_scored_summary_range():
    with pytest.raises(ValueError):
        ScoredSummary(cand("c"), 0, None, DEFAULTED)


# selection

def test_select_unique_max():
    sel = select_best([scored("c0", 7, seed=0), scored("c1", 9, seed=1), scored("c2", 8, seed=2)])
    assert sel.winner.candidate.candidate_id == "c1" and not sel.tie_break_applied


def test_select_tie_goes_to_smallest_summarizer_then_seed():
    sel = select_best([scored("c0", 7, seed=0), scored("c1", 9, seed=1), scored("c2", 9, seed=2)])
    assert sel.winner.candidate.candidate_id == "c1" and sel.tie_break_applied
    sel = select_best([scored("b", 9, "B", seed=1), scored("a", 9, "A", seed=50)])
    assert sel.winner.candidate.candidate_id == "a"


def test_select_single_and_empty():
    only = scored("c0", 2)
    assert select_best([only]).winner is only
    with pytest.raises(ValueError):
        select_best([])


def random_pool(rng: random.Random) -> list[ScoredSummary]:
    n = rng.randint(1, 8)
    seeds = rng.sample(range(1000), n)
    return [scored(f"c{i}", rng.randint(1, 10), rng.choice("AB"), seeds[i]) for i in range(n)]


def test_selection_against_brute_force():
    rng = random.Random(99)
    for _ in range(1000):
        pool = random_pool(rng)
        sel = select_best(pool)
        top = max(s.score for s in pool)
        assert sel.winner.score == top
        assert sel.tie_break_applied == (sum(s.score == top for s in pool) > 1)
        shuffled = pool[:]
        rng.shuffle(shuffled)
        assert select_best(shuffled).winner == sel.winner
        if sel.winner.score > 1:
            extra = scored("extra", rng.randint(1, sel.winner.score - 1), rng.choice("AB"), 5000)
            assert select_best(pool + [extra]).winner == sel.winner


# tallies

def selection_for(summarizer, i):
    s = ScoredSummary(cand(f"u{i}:{summarizer}:0", summarizer, i, user=f"u{i}"), 9, None, PARSED)
    return SummarySelection(f"u{i}", s, (s,), False)


def test_winner_counts_split():
    sels = [selection_for("summarizer-A", i) for i in range(93)] + \
           [selection_for("summarizer-B", i) for i in range(93, 125)]
    assert winner_counts(sels) == {"summarizer-A": 93, "summarizer-B": 32}


def test_winner_counts_single_backend():
    tally = winner_counts([selection_for("A", i) for i in range(5)], backends=["A", "B"])
    assert tally == {"A": 5, "B": 0}
    assert [k for k, v in tally.items() if v] == ["A"]


def test_winner_counts_total():
    rng = random.Random(1)
    sels = [selection_for(rng.choice("ABC"), i) for i in range(rng.randint(1, 200))]
    assert sum(winner_counts(sels).values()) == len(sels)


# generation

def test_one_backend_k3_distinct_seeds():
    a = MockBackend(name="A").add("summarization:*", "Candidate seed {seed}.")
    cfg = SummarizationConfig(("A",), "ev", k=3)
    cands = generate_candidates(timeline(), {}, RiskLabel.MODERATE, cfg, gateway(a))
    assert len(cands) == 3
    assert len({c.seed for c in cands}) == 3
    assert [c.text for c in cands] == [f"Candidate seed {c.seed}." for c in cands]


def test_two_backends_k3():
    a = MockBackend(name="summarizer-A").add("summarization:*", "from A {seed}")
    b = MockBackend(name="summarizer-B").add("summarization:*", "from B {seed}")
    cfg = SummarizationConfig(("summarizer-A", "summarizer-B"), "ev", k=3)
    cands = generate_candidates(timeline(), {}, RiskLabel.MODERATE, cfg, gateway(a, b))
    assert len(cands) == 6
    assert sum(c.summarizer == "summarizer-A" for c in cands) == 3
    assert len({c.seed for c in cands}) == 6


def test_label_mismatch():
    cfg = SummarizationConfig(("A",), "ev")
    with pytest.raises(ValueError):
        generate_candidates(timeline(), {}, RiskLabel.LOW, cfg, gateway(MockBackend(name="A")))


@pytest.mark.parametrize("length, reprompted, flagged", [(299, False, False), (300, True, True), (450, True, True)])
def test_length_constraint(length, reprompted, flagged):
    a = MockBackend(name="A").add("summarization:*", "x" * length)
    cands = generate_candidates(timeline(), {}, RiskLabel.MODERATE, SummarizationConfig(("A",), "ev", k=1), gateway(a))
    (c,) = cands
    assert (c.reprompted, c.over_length) == (reprompted, flagged)
    assert len(a.calls) == (2 if reprompted else 1)


def test_shortening_that_works_clears_flag():
    a = (MockBackend(name="A")
         .add("summarization:*", "y" * 450)
         .add("summarization:contains:Rewrite it so that it is less than", "short now"))
    (c,) = generate_candidates(timeline(), {}, RiskLabel.MODERATE, SummarizationConfig(("A",), "ev", k=1), gateway(a))
    assert c.text == "short now" and c.reprompted and not c.over_length


def test_grounded_context_skips_ungrounded():
    tl = timeline()
    hs = HighlightSet(tl.posts[0].post_id,
                      [Highlight("pain every day", EXACT, (7, 21), 1.0), Highlight("invented", "ungrounded")], "")
    ctx = grounded_context(tl, {hs.post_id: hs}, 300)
    assert ctx.posts_and_highlights[0][1] == ("pain every day",)
    assert ctx.posts_and_highlights[1][1] == ()


# scoring

REASK = "evaluator:contains:Keep the answer format exactly"


@pytest.mark.parametrize("first, reask, score, status, calls", [
    ("The score is [7] because it is faithful", None, 7, PARSED, 1),
    ("I think 8/10", "I think 8/10", 1, DEFAULTED, 2),
    ("no idea", "The score is [6]", 6, PARSED, 2),
    ("The score is [10]", None, 10, PARSED, 1),
])
def test_score_candidate(first, reask, score, status, calls):
    ev = MockBackend(name="ev").add("evaluator:*", first)
    if reask is not None:
        ev.add(REASK, reask)
    result = score_candidate(cand("c", text="A summary."), ["post"], RiskLabel.LOW,
                             SummarizationConfig(("A",), "ev"), gateway(ev))
    assert (result.score, result.parse_status) == (score, status)
    assert len(ev.calls) == calls


def test_evaluator_failure_defaults():
    ev = MockBackend(name="ev").add("evaluator:*", "x", fail_count=9)
    result = score_candidate(cand("c", text="A summary."), ["post"], RiskLabel.LOW,
                             SummarizationConfig(("A",), "ev"), gateway(ev))
    assert result.score == 1 and result.parse_status == DEFAULTED and result.error


# end to end

def test_scoring_waits_for_all_generation():
    a = MockBackend(name="A", delay=0.002).add("summarization:*", "A says {seed}.")
    b = MockBackend(name="B", delay=0.002).add("summarization:*", "B says {seed}.")
    ev = MockBackend(name="ev").add("evaluator:contains:A says", "The score is [8]") \
                               .add("evaluator:*", "The score is [5]")
    cfg = SummarizationConfig(("A", "B"), "ev", k=2)
    outcomes = summarize_users([timeline("u1"), timeline("u2")], {}, cfg, gateway(a, b, ev))
    last_gen = max(c["end"] for c in a.calls + b.calls)
    assert min(c["start"] for c in ev.calls) >= last_gen
    assert winner_counts(outcomes, ["A", "B"]) == {"A": 2, "B": 0}
    assert all(o.selection.winner.score == 8 for o in outcomes)
    stats = summarization_stats(outcomes, ["A", "B"])
    assert stats["candidates"] == 8 and stats["tie_breaks"] == 2


def test_user_with_no_candidates_fails():
    a = MockBackend(name="A").add("summarization:*", "x", fail_count=9)
    ev = MockBackend(name="ev").add("evaluator:*", "The score is [5]")
    (outcome,) = summarize_users([timeline()], {}, SummarizationConfig(("A",), "ev", k=2), gateway(a, ev))
    assert not outcome.ok and len(outcome.failures) == 2
    rec = outcome.to_record()
    assert rec["status"] == "failed" and rec["winner_text"] is None
    assert ev.calls == []


def test_partial_backend_failure_still_selects():
    a = MockBackend(name="A").add("summarization:*", "x", fail_count=9)
    b = MockBackend(name="B").add("summarization:*", "B text.")
    ev = MockBackend(name="ev").add("evaluator:*", "The score is [4]")
    (outcome,) = summarize_users([timeline()], {}, SummarizationConfig(("A", "B"), "ev", k=1), gateway(a, b, ev))
    assert outcome.ok and outcome.selection.winner.candidate.summarizer == "B"
    assert [f["summarizer"] for f in outcome.failures] == ["A"]


def test_config_validation():
    with pytest.raises(ValueError):
        SummarizationConfig(("A",), "ev", k=0)
    with pytest.raises(ValueError):
        SummarizationConfig(("A", "A"), "ev")
    with pytest.raises(ValueError):
        SummarizationConfig((), "ev")
