"""Selection mechanisms over generated queries.

Four strategies from the lineage of query-generation pipelines: top-K by mean
log-prob, top-K by pointwise reranker score, consistency filtering (keep a
query only if its source document comes back in the top-K retrieved), and the
margin filter that keeps a triplet candidate only when all three of its
relevance scores lie strictly inside (L, H). `subsample` backs the
filter-ratio ablation.

Every filter returns a sub-multiset of its input; items are never mutated
except for the reranker-score annotation.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

from .bm25 import Bm25Index, bm25_retrieve_topk
from .corpus import Corpus
from .errors import BackendError
from .scoring import PointwiseScorer, ScoredQuery, annotate_reranker_score

log = logging.getLogger(__name__)

STRATEGIES = ("logprob-topk", "reranker-topk", "consistency", "margin", "random")


@dataclass(frozen=True)
class FilterConfig:
    strategy: str = "logprob-topk"
    keep: int = 10_000
    top_k_retrieval: int = 3
    L: float = 0.3
    H: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown filter strategy {self.strategy!r}")
        if self.keep < 1:
            raise ValueError("keep must be >= 1")
        if self.top_k_retrieval < 1:
            raise ValueError("top_k_retrieval must be >= 1")
        if not (0.0 <= self.L < self.H <= 1.0):
            raise ValueError(f"margins must satisfy 0 <= L < H <= 1, got L={self.L} H={self.H}")


def _topk(items: list[ScoredQuery], keep: int, key) -> list[ScoredQuery]:
    ranked = sorted(items, key=lambda s: (-key(s), s.doc_id, s.seq))
    if keep > len(items):
        log.warning("keep=%d exceeds input size %d; returning everything", keep, len(items))
        return ranked
    return ranked[:keep]


def filter_logprob_topk(scored: list[ScoredQuery], keep: int) -> list[ScoredQuery]:
    """The `keep` items with highest mean log-prob, descending; ties broken by
    (doc_id, seq) ascending.
    """
    for item in scored:
        if item.mean_logprob is None:
            raise ValueError(
                f"item for doc {item.doc_id!r} seq {item.seq} has no mean_logprob"
            )
    return _topk(scored, keep, lambda s: s.mean_logprob)


def filter_reranker_topk(
    scored: list[ScoredQuery],
    keep: int,
    pointwise_scorer: PointwiseScorer,
    corpus: Corpus,
    max_attempts: int = 3,
) -> list[ScoredQuery]:
    """Top-K keyed on a pointwise relevance scorer; the score is recorded on
    each surviving item. Items whose scoring fails after retries are excluded
    and counted.
    """
    pairs = [(item.query_text, corpus[item.doc_id].full_text()) for item in scored]
    annotated: list[ScoredQuery] = []
    failed = 0
    try:
        for item, score in zip(scored, pointwise_scorer.score_pairs(pairs)):
            annotated.append(annotate_reranker_score(item, score))
    except BackendError:
        # batch path failed; retry item by item so one bad pair cannot sink the rest
        annotated = []
        for item, pair in zip(scored, pairs):
            score = None
            for attempt in range(max_attempts):
                try:
                    score = pointwise_scorer.score_pairs([pair])[0]
                    break
                except BackendError as exc:
                    if not exc.retryable or attempt == max_attempts - 1:
                        log.warning(
                            "scoring failed for doc %s seq %d: %s", item.doc_id, item.seq, exc
                        )
                        break
            if score is None:
                failed += 1
                continue
            annotated.append(annotate_reranker_score(item, score))
    if failed:
        log.warning("reranker filter: %d items excluded after scorer failures", failed)
    return _topk(annotated, keep, lambda s: s.reranker_score)


def filter_consistency(
    scored: list[ScoredQuery], index: Bm25Index, top_k_retrieval: int
) -> list[ScoredQuery]:
    """Keep exactly the items whose source document appears in the top-K
    retrieved for their query text; original order preserved.
    """
    if top_k_retrieval < 1:
        raise ValueError("top_k_retrieval must be >= 1")
    kept = []
    for item in scored:
        hits = bm25_retrieve_topk(index, item.query_text, top_k_retrieval)
        if any(doc_id == item.doc_id for doc_id, _ in hits):
            kept.append(item)
    return kept


def filter_margin(items: list, L: float = 0.3, H: float = 0.7) -> list:
    """Keep a triplet candidate only when all three of its relevance scores
    lie strictly inside (L, H). Drops both document-copy degenerates (scores
    above H) and irrelevant queries (scores below L).
    """
    if not (0.0 <= L < H <= 1.0):
        raise ValueError(f"margins must satisfy 0 <= L < H <= 1, got L={L} H={H}")
    kept = []
    for cand in items:
        scores = (cand.s_reference, cand.s_teacher, cand.s_student)
        for s in scores:
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"candidate score {s} outside [0, 1] (doc {cand.pair.doc.id!r})")
        if all(L < s < H for s in scores):
            kept.append(cand)
    return kept


def subsample(items: list, n: int, seed: int) -> list:
    """Uniform sample of n items without replacement, deterministic per seed."""
    if n > len(items):
        raise ValueError(f"cannot sample {n} from {len(items)} items")
    return random.Random(seed).sample(items, n)
