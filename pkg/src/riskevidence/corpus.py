"""Loading, validation and grouping of the labeled post corpus.

Records are line-delimited JSON objects with ``post_id``, ``user_id``,
``timestamp``, ``text`` and ``label``. Malformed lines are not dropped
silently: each one lands in a rejection list with a ``reason``.
"""
from __future__ import annotations

import enum
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("post_id", "user_id", "timestamp", "text", "label")


class CorpusError(ValueError):
    """Raised for corpus-level failures (unreadable file, duplicates, conflicts)."""


class RiskLabel(str, enum.Enum):
    LOW = "Low"
    MODERATE = "Moderate"
    SEVERE = "Severe"

    @classmethod
    def parse(cls, value: str | "RiskLabel") -> "RiskLabel":
        if isinstance(value, RiskLabel):
            return value
        if not isinstance(value, str):
            raise ValueError(f"risk label must be a string, got {type(value).__name__}")
        key = value.strip().lower()
        for label in cls:
            if label.value.lower() == key:
                return label
        raise ValueError(f"unknown risk label {value!r}")

    @property
    def slug(self) -> str:
        return self.value.lower()

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Post:
    post_id: str
    user_id: str
    timestamp: int
    text: str
    label: RiskLabel

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"post {self.post_id!r} has empty text")

    def to_record(self) -> dict:
        return {
            "post_id": self.post_id,
            "user_id": self.user_id,
            "timestamp": self.timestamp,
            "text": self.text,
            "label": self.label.slug,
        }


@dataclass(frozen=True)
class UserTimeline:
    user_id: str
    label: RiskLabel
    posts: tuple[Post, ...]

    def __post_init__(self):
        if not self.posts:
            raise ValueError(f"timeline {self.user_id!r} has no posts")
        for post in self.posts:
            if post.user_id != self.user_id or post.label != self.label:
                raise ValueError(f"post {post.post_id!r} does not belong to timeline {self.user_id!r}")
        keys = [(p.timestamp, p.post_id) for p in self.posts]
        if keys != sorted(keys):
            raise ValueError(f"timeline {self.user_id!r} is not time-ordered")


@dataclass
class Rejection:
    line_no: int
    record: dict | str
    reason: str

    def to_record(self) -> dict:
        if isinstance(self.record, dict):
            out = dict(self.record)
        else:
            out = {"raw": self.record}
        out["line_no"] = self.line_no
        out["reason"] = self.reason
        return out


@dataclass
class LoadResult:
    timelines: list[UserTimeline]
    rejections: list[Rejection] = field(default_factory=list)
    input_lines: int = 0

    @property
    def accepted_count(self) -> int:
        return sum(len(t.posts) for t in self.timelines)

    @property
    def rejected_count(self) -> int:
        return len(self.rejections)


@dataclass(frozen=True)
class CorpusStats:
    posts: dict[RiskLabel, int]
    users: dict[RiskLabel, int]
    mean_post_length: dict[RiskLabel, float]
    mean_posts_per_user: dict[RiskLabel, float]

    @property
    def total_posts(self) -> int:
        return sum(self.posts.values())

    @property
    def total_users(self) -> int:
        return sum(self.users.values())

    def to_dict(self) -> dict:
        rows = {}
        for label in RiskLabel:
            rows[label.slug] = {
                "posts": self.posts[label],
                "users": self.users[label],
                "mean_post_length": self.mean_post_length[label],
                "mean_posts_per_user": self.mean_posts_per_user[label],
            }
        return {"per_label": rows, "total_posts": self.total_posts, "total_users": self.total_users}

    def format_table(self) -> str:
        """Plain-text table in the highlights/summarization statistics layout."""
        lines = [
            f"{'Suicide Risk':<14}{'# posts (avg. # length)':<28}{'# users (avg. # posts)':<24}",
        ]
        for label in RiskLabel:
            posts = f"{self.posts[label]} ({self.mean_post_length[label]:,.0f})"
            users = f"{self.users[label]} ({self.mean_posts_per_user[label]:.2f})"
            lines.append(f"{label.value:<14}{posts:<28}{users:<24}")
        lines.append(f"{'Total':<14}{str(self.total_posts) + ' posts':<28}{str(self.total_users) + ' users':<24}")
        return "\n".join(lines)


def _validate_record(obj) -> tuple[dict | None, str | None]:
    if not isinstance(obj, dict):
        return None, "record is not an object"
    for name in REQUIRED_FIELDS:
        if name not in obj or obj[name] is None:
            return None, f"missing field '{name}'"
    for name in ("post_id", "user_id", "text"):
        if not isinstance(obj[name], str):
            return None, f"field '{name}' must be a string"
    if not obj["post_id"] or not obj["user_id"]:
        return None, "empty id"
    ts = obj["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        return None, "field 'timestamp' must be an integer"
    if not obj["text"].strip():
        return None, "field 'text' is empty"
    try:
        label = RiskLabel.parse(obj["label"])
    except ValueError as exc:
        return None, str(exc)
    return {**obj, "label": label}, None


def group_posts(posts: Iterable[Post]) -> list[UserTimeline]:
    """Group posts into timelines ordered by user id; ties on timestamp break by post id."""
    by_user: dict[str, list[Post]] = defaultdict(list)
    for post in posts:
        by_user[post.user_id].append(post)
    timelines = []
    for user_id in sorted(by_user):
        user_posts = by_user[user_id]
        labels = {p.label for p in user_posts}
        if len(labels) > 1:
            names = ", ".join(sorted(l.value for l in labels))
            raise CorpusError(f"user {user_id!r} has conflicting labels: {names}")
        user_posts.sort(key=lambda p: (p.timestamp, p.post_id))
        timelines.append(UserTimeline(user_id, user_posts[0].label, tuple(user_posts)))
    return timelines


def load_corpus(path: str | Path, format: str = "jsonl") -> LoadResult:
    """Read a corpus file into user timelines.

    Raises CorpusError if the file cannot be read, contains no valid record,
    repeats a post id, or assigns one user two different labels.
    """
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format {format!r}")
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    posts: list[Post] = []
    rejections: list[Rejection] = []
    seen: dict[str, int] = {}
    lines = raw.splitlines()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            rejections.append(Rejection(line_no, line, "blank line"))
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejections.append(Rejection(line_no, line, f"invalid JSON: {exc.msg}"))
            continue
        rec, reason = _validate_record(obj)
        if rec is None:
            rejections.append(Rejection(line_no, obj, reason))
            continue
        if rec["post_id"] in seen:
            raise CorpusError(
                f"duplicate post_id {rec['post_id']!r} on lines {seen[rec['post_id']]} and {line_no}"
            )
        seen[rec["post_id"]] = line_no
        posts.append(Post(rec["post_id"], rec["user_id"], rec["timestamp"], rec["text"], rec["label"]))

    if not posts:
        raise CorpusError(f"no valid records in {path}")
    if rejections:
        logger.warning("%d of %d corpus lines rejected", len(rejections), len(lines))
    return LoadResult(group_posts(posts), rejections, len(lines))


def dump_corpus(timelines: Iterable[UserTimeline], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for timeline in timelines:
            for post in timeline.posts:
                fh.write(json.dumps(post.to_record(), ensure_ascii=False) + "\n")


def write_rejections(rejections: Iterable[Rejection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rej in rejections:
            fh.write(json.dumps(rej.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def compute_stats(timelines: Iterable[UserTimeline]) -> CorpusStats:
    timelines = list(timelines)
    if not timelines:
        raise ValueError("compute_stats needs at least one timeline")
    posts = {label: 0 for label in RiskLabel}
    users = {label: 0 for label in RiskLabel}
    chars = {label: 0 for label in RiskLabel}
    for timeline in timelines:
        users[timeline.label] += 1
        posts[timeline.label] += len(timeline.posts)
        chars[timeline.label] += sum(len(p.text) for p in timeline.posts)
    mean_len = {l: chars[l] / posts[l] if posts[l] else 0.0 for l in RiskLabel}
    mean_ppu = {l: posts[l] / users[l] if users[l] else 0.0 for l in RiskLabel}
    return CorpusStats(posts, users, mean_len, mean_ppu)


def iter_posts(timelines: Iterable[UserTimeline]) -> Iterable[Post]:
    for timeline in timelines:
        yield from timeline.posts
