"""In-memory BM25 inverted index.

Uses the Lucene-form non-negative idf, ln(1 + (N - df + 0.5) / (df + 0.5)),
so scores stay >= 0 and the corpus softmax is well behaved. Tokenization is
`textutil.tokenize` (lowercase alphanumeric split, no stemming or stop words).
Defaults k1=0.9, b=0.4.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Corpus
from .textutil import tokenize


@dataclass
class Bm25Index:
    doc_count: int
    avg_doc_len: float
    doc_lengths: dict[str, int]
    # term -> {doc_id: term frequency}
    postings: dict[str, dict[str, int]]
    k1: float = 0.9
    b: float = 0.4
    _idf_cache: dict[str, float] = field(default_factory=dict, repr=False)

    def idf(self, term: str) -> float:
        cached = self._idf_cache.get(term)
        if cached is None:
            df = len(self.postings.get(term, ()))
            cached = math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))
            self._idf_cache[term] = cached
        return cached

    def _tf_norm(self, tf: int, doc_len: int) -> float:
        denom = tf + self.k1 * (1.0 - self.b + self.b * doc_len / self.avg_doc_len)
        return tf * (self.k1 + 1.0) / denom


def build_bm25_index(corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> Bm25Index:
    if not corpus:
        raise ValueError("cannot build a BM25 index over an empty corpus")
    if k1 <= 0 or not 0.0 <= b <= 1.0:
        raise ValueError(f"invalid BM25 parameters k1={k1}, b={b}")
    doc_lengths: dict[str, int] = {}
    postings: dict[str, dict[str, int]] = {}
    for doc_id, doc in corpus.items():
        tokens = tokenize(doc.full_text())
        doc_lengths[doc_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, {})[doc_id] = tf
    avg_doc_len = sum(doc_lengths.values()) / len(doc_lengths)
    if avg_doc_len == 0:
        raise ValueError("corpus contains no indexable tokens")
    return Bm25Index(
        doc_count=len(doc_lengths),
        avg_doc_len=avg_doc_len,
        doc_lengths=doc_lengths,
        postings=postings,
        k1=k1,
        b=b,
    )


def bm25_score(index: Bm25Index, query_text: str, doc_id: str) -> float:
    """Score one (query, document) pair. Repeated query terms contribute
    once per distinct term, multiplied by their query-side frequency.
    """
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    doc_len = index.doc_lengths[doc_id]
    score = 0.0
    for term, qtf in Counter(tokenize(query_text)).items():
        tf = index.postings.get(term, {}).get(doc_id, 0)
        if tf == 0:
            continue
        score += qtf * index.idf(term) * index._tf_norm(tf, doc_len)
    return score


def _accumulate_scores(index: Bm25Index, query_text: str) -> dict[str, float]:
    """Raw BM25 scores for every document matching at least one query term."""
    acc: dict[str, float] = {}
    for term, qtf in Counter(tokenize(query_text)).items():
        doc_tfs = index.postings.get(term)
        if not doc_tfs:
            continue
        weight = qtf * index.idf(term)
        for doc_id, tf in doc_tfs.items():
            acc[doc_id] = acc.get(doc_id, 0.0) + weight * index._tf_norm(
                tf, index.doc_lengths[doc_id]
            )
    return acc


def bm25_softmax_score(
    index: Bm25Index, query_text: str, doc_id: str, temperature: float = 1.0
) -> float:
    """The target document's softmax probability over raw BM25 scores of the
    whole corpus. Documents matching no query term enter with score 0.
    """
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    matching = _accumulate_scores(index, query_text)
    n_zero = index.doc_count - len(matching)
    m = max(matching.values(), default=0.0)
    if n_zero > 0:
        m = max(m, 0.0)
    denom = sum(math.exp((s - m) / temperature) for s in matching.values())
    if n_zero > 0:
        denom += n_zero * math.exp(-m / temperature)
    return math.exp((matching.get(doc_id, 0.0) - m) / temperature) / denom


def bm25_retrieve_topk(
    index: Bm25Index, query_text: str, k: int
) -> list[tuple[str, float]]:
    """Top-k matching documents, score descending, ties by ascending doc_id.
    Only documents with score > 0 appear.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    matching = _accumulate_scores(index, query_text)
    ranked = sorted(matching.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(doc_id, s) for doc_id, s in ranked[:k] if s > 0.0]
