from __future__ import annotations

import json
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures"
DEMO = ROOT / "fixtures" / "demo"

# posts and users per label in the evaluation split
LABEL_SHAPE = {"low": (17, 13), "moderate": (91, 75), "severe": (54, 37)}

WORDS = (
    "tired alone night school work family friends empty pain sleep hope lost "
    "cannot anymore people help tried today again never always feel think"
).split()


def shaped_records(seed: int = 7) -> list[dict]:
    """Synthetic records with the evaluation split's per-label post and user counts."""
    rng = random.Random(seed)
    records = []
    uid = 0
    pid = 0
    for label, (n_posts, n_users) in LABEL_SHAPE.items():
        per_user = [1] * n_users
        for i in range(n_posts - n_users):
            per_user[i % n_users] += 1
        for count in per_user:
            uid += 1
            user = f"u{uid:03d}"
            for _ in range(count):
                pid += 1
                body = " ".join(rng.choice(WORDS) for _ in range(rng.randint(8, 30)))
                records.append({
                    "post_id": f"p{pid:03d}",
                    "user_id": user,
                    "timestamp": rng.randint(1_200_000_000, 1_440_000_000),
                    "text": f"Entry {pid} by {user}: I {body}.",
                    "label": rng.choice([label, label.upper(), label.title()]),
                })
    rng.shuffle(records)
    return records


def write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def shaped_corpus(tmp_path) -> Path:
    return write_jsonl(tmp_path / "corpus.jsonl", shaped_records())


@pytest.fixture
def no_sleep():
    calls = []
    return calls.append


# filled by the acceptance tests, printed once at the end of the session
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, float, float]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, elapsed, budget in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} [{number}] {title} ({elapsed:.2f}s, budget {budget:g}s)")
