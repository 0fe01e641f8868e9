"""Suicide-risk evidence extraction and summarization over LLM endpoints.

Two pipelines share one corpus: per-post highlight extraction guided by a
risk-tagged dictionary and an expert identity, and per-user evidence
summaries chosen from several candidates by an LLM consistency judge.
"""

__version__ = "0.1.0"

from .corpus import Post, RiskLabel, UserTimeline, compute_stats, load_corpus  # noqa: E402
from .lexicon import Lexicon, load_lexicon, match_terms, terms_for_prompt  # noqa: E402

__all__ = [
    "Lexicon",
    "Post",
    "RiskLabel",
    "UserTimeline",
    "compute_stats",
    "load_corpus",
    "load_lexicon",
    "match_terms",
    "terms_for_prompt",
]
