from __future__ import annotations

import json
import random

import pytest

from conftest import shaped_records, write_jsonl
from oracles import recount_stats
from riskevidence.corpus import (
    CorpusError,
    Post,
    RiskLabel,
    UserTimeline,
    compute_stats,
    dump_corpus,
    group_posts,
    iter_posts,
    load_corpus,
    write_rejections,
)


def rec(pid, uid, ts, text="some text", label="low"):
    return {"post_id": pid, "user_id": uid, "timestamp": ts, "text": text, "label": label}


def test_three_records_two_users(tmp_path):
    path = write_jsonl(tmp_path / "c.jsonl", [rec("p3", "u1", 30), rec("p1", "u1", 10), rec("p2", "u2", 20)])
    result = load_corpus(path)
    assert [t.user_id for t in result.timelines] == ["u1", "u2"]
    assert [p.post_id for p in result.timelines[0].posts] == ["p1", "p3"]
    assert result.rejections == []


def test_timestamp_ties_break_by_post_id():
    posts = [Post("b", "u", 5, "x", RiskLabel.LOW), Post("a", "u", 5, "y", RiskLabel.LOW)]
    (tl,) = group_posts(posts)
    assert [p.post_id for p in tl.posts] == ["a", "b"]


def test_missing_text_is_rejected_not_dropped(tmp_path):
    bad = rec("p2", "u1", 2)
    del bad["text"]
    path = write_jsonl(tmp_path / "c.jsonl", [rec("p1", "u1", 1), bad])
    result = load_corpus(path)
    assert result.accepted_count == 1
    (rej,) = result.rejections
    assert rej.line_no == 2 and "text" in rej.reason


def test_every_line_accounted_for(tmp_path):
    path = tmp_path / "c.jsonl"
    lines = [
        json.dumps(rec("p1", "u1", 1)),
        "{not json",
        "",
        json.dumps(rec("p2", "u1", 2, label="extreme")),
        json.dumps(rec("p3", "u2", "yesterday")),
        json.dumps(rec("p4", "u2", 4, text="   ")),
        json.dumps([1, 2]),
        json.dumps(rec("p5", "u3", 5, label="SEVERE")),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    result = load_corpus(path)
    assert result.input_lines == len(lines)
    assert result.accepted_count + result.rejected_count == len(lines)
    assert result.accepted_count == 2


def test_rejection_report_keeps_record_and_reason(tmp_path):
    bad = rec("p2", "u1", 2, label="weird")
    path = write_jsonl(tmp_path / "c.jsonl", [rec("p1", "u1", 1), bad])
    result = load_corpus(path)
    out = tmp_path / "rej.jsonl"
    write_rejections(result.rejections, out)
    (row,) = [json.loads(l) for l in out.read_text().splitlines()]
    assert {k: row[k] for k in bad} == bad
    assert "weird" in row["reason"]


@pytest.mark.parametrize("records, match", [
    ([rec("p1", "u1", 1), rec("p1", "u2", 2)], "duplicate"),
    ([rec("p1", "u1", 1, label="low"), rec("p2", "u1", 2, label="severe")], "conflicting"),
])
def test_hard_errors(tmp_path, records, match):
    with pytest.raises(CorpusError, match=match):
        load_corpus(write_jsonl(tmp_path / "c.jsonl", records))


def test_no_valid_records(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("garbage\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(path)


def test_unreadable(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.jsonl")


def test_round_trip(tmp_path):
    src = write_jsonl(tmp_path / "a.jsonl", shaped_records(seed=3))
    first = load_corpus(src).timelines
    dump_corpus(first, tmp_path / "b.jsonl")
    assert load_corpus(tmp_path / "b.jsonl").timelines == first


def test_grouping_preserves_post_ids(tmp_path):
    records = shaped_records(seed=4)
    result = load_corpus(write_jsonl(tmp_path / "c.jsonl", records))
    assert sorted(p.post_id for p in iter_posts(result.timelines)) == sorted(r["post_id"] for r in records)


def test_one_low_post_of_ten_chars():
    stats = compute_stats(group_posts([Post("p", "u", 0, "0123456789", RiskLabel.LOW)]))
    assert stats.users[RiskLabel.LOW] == 1 and stats.posts[RiskLabel.LOW] == 1
    assert stats.mean_post_length[RiskLabel.LOW] == 10


def test_length_counts_characters_not_bytes():
    stats = compute_stats(group_posts([Post("p", "u", 0, "żółw 🐢", RiskLabel.SEVERE)]))
    assert stats.mean_post_length[RiskLabel.SEVERE] == 6


def test_label_shape(shaped_corpus):
    stats = compute_stats(load_corpus(shaped_corpus).timelines)
    assert stats.posts == {RiskLabel.LOW: 17, RiskLabel.MODERATE: 91, RiskLabel.SEVERE: 54}
    assert stats.users == {RiskLabel.LOW: 13, RiskLabel.MODERATE: 75, RiskLabel.SEVERE: 37}
    assert (stats.total_posts, stats.total_users) == (162, 125)
    table = stats.format_table()
    assert "162 posts" in table and "125 users" in table


@pytest.mark.parametrize("seed", range(5))
def test_stats_match_recount(tmp_path, seed):
    rng = random.Random(seed)
    records = []
    for i in range(rng.randint(5, 60)):
        uid = f"u{rng.randint(0, 15)}"
        label = ["low", "moderate", "severe"][sum(map(ord, uid)) % 3]
        text = "".join(rng.choice("abc ĳ😀\t") for _ in range(rng.randint(1, 40))) + "."
        records.append(rec(f"p{i}", uid, rng.randint(0, 100), text, label))
    stats = compute_stats(load_corpus(write_jsonl(tmp_path / "c.jsonl", records)).timelines)
    expected = recount_stats(records)
    for label in RiskLabel:
        row = expected[label.slug]
        assert stats.posts[label] == row["posts"]
        assert stats.users[label] == row["users"]
        assert stats.mean_post_length[label] == pytest.approx(row["mean_len"], abs=1e-12)
        assert stats.mean_posts_per_user[label] == pytest.approx(row["ppu"], abs=1e-12)


def test_compute_stats_requires_input():
    with pytest.raises(ValueError):
        compute_stats([])


def test_timeline_invariants():
    p1 = Post("p1", "u", 2, "x", RiskLabel.LOW)
    p2 = Post("p2", "u", 1, "y", RiskLabel.LOW)
    with pytest.raises(ValueError):
        UserTimeline("u", RiskLabel.LOW, (p1, p2))
    with pytest.raises(ValueError):
        UserTimeline("u", RiskLabel.SEVERE, (p2,))


def test_label_parsing():
    assert RiskLabel.parse("MODERATE") is RiskLabel.MODERATE
    assert RiskLabel.SEVERE.slug == "severe"
    with pytest.raises(ValueError):
        RiskLabel.parse("none")
