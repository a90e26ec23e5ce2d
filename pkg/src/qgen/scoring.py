"""Query-quality scores.

Four signals are computed per (document, query):
  - mean log-prob of the generated tokens (selection score for top-K picking)
  - BM25 softmax probability of the target document over the whole corpus
  - rescaled cosine of the embedding vectors, (1 + cos) / 2
  - their blend, default 0.5 * enc + 0.5 * bm25_softmax

`PointwiseScorer` is the relevance-scorer contract shared by reranking and
reranker-based filtering; `HttpPointwiseScorer` speaks the `/score` wire
format and `LocalCombinedScorer` is its deterministic in-process stand-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np
import requests

from .bm25 import Bm25Index, bm25_softmax_score
from .corpus import Corpus, Document
from .errors import BackendError
from .genclient import Generation


@dataclass(frozen=True)
class ScoredQuery:
    generation: Generation
    mean_logprob: float | None = None
    bm25_softmax: float | None = None
    enc_score: float | None = None
    combined: float | None = None
    reranker_score: float | None = None

    def __post_init__(self):
        if self.combined is not None and (self.bm25_softmax is None or self.enc_score is None):
            raise ValueError("combined score requires both bm25_softmax and enc_score")

    @property
    def doc_id(self) -> str:
        return self.generation.doc_id

    @property
    def seq(self) -> int:
        return self.generation.seq

    @property
    def query_text(self) -> str:
        return self.generation.query_text


def mean_logprob(generation: Generation) -> float:
    """Average per-token log-probability of the extracted query (the
    selection score of the log-prob top-K filter).
    """
    if not generation.token_logprobs:
        raise ValueError(
            f"generation for doc {generation.doc_id!r} has no token log-probs"
        )
    return sum(generation.token_logprobs) / len(generation.token_logprobs)


def enc_score(doc_vec: np.ndarray, query_vec: np.ndarray) -> float:
    """Rescaled cosine similarity, (1 + cos) / 2, in [0, 1].

    The boundary identities (same vector -> 1, opposite -> 0) are made exact
    rather than left to rounding in the norm product.
    """
    doc_vec = np.asarray(doc_vec, dtype=np.float64)
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if doc_vec.shape != query_vec.shape:
        raise ValueError(f"dimension mismatch: {doc_vec.shape} vs {query_vec.shape}")
    dn = float(np.linalg.norm(doc_vec))
    qn = float(np.linalg.norm(query_vec))
    if dn == 0.0 or qn == 0.0:
        raise ValueError("cannot score a zero vector")
    if np.array_equal(doc_vec, query_vec):
        return 1.0
    if np.array_equal(doc_vec, -query_vec):
        return 0.0
    cos = float(np.dot(doc_vec, query_vec)) / (dn * qn)
    cos = max(-1.0, min(1.0, cos))
    return (1.0 + cos) / 2.0


def combined_score(
    doc: Document,
    query_text: str,
    index: Bm25Index,
    embedder,
    w_enc: float = 0.5,
    w_bm25: float = 0.5,
) -> float:
    """Blend of encoder and corpus-softmax BM25 scores. An empty query is
    maximally irrelevant and scores 0.
    """
    if w_enc < 0 or w_bm25 < 0 or abs(w_enc + w_bm25 - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1, got ({w_enc}, {w_bm25})")
    if not query_text.strip():
        return 0.0
    vecs = embedder.embed_many([doc.full_text(), query_text])
    enc = enc_score(vecs[0], vecs[1])
    sm = bm25_softmax_score(index, query_text, doc.id)
    return w_enc * enc + w_bm25 * sm


def score_generations(
    generations: Sequence[Generation],
    corpus: Corpus,
    index: Bm25Index,
    embedder,
    w_enc: float = 0.5,
    w_bm25: float = 0.5,
    with_combined: bool = True,
) -> list[ScoredQuery]:
    """Decorate generations with mean log-prob and, unless disabled, the
    encoder/BM25/combined scores. Degenerate (empty) queries get score 0 and
    no mean log-prob.
    """
    out = []
    for gen in generations:
        mlp = mean_logprob(gen) if gen.token_logprobs else None
        if not with_combined:
            out.append(ScoredQuery(generation=gen, mean_logprob=mlp))
            continue
        doc = corpus[gen.doc_id]
        if gen.degenerate:
            out.append(
                ScoredQuery(
                    generation=gen,
                    mean_logprob=mlp,
                    bm25_softmax=0.0,
                    enc_score=0.0,
                    combined=0.0,
                )
            )
            continue
        vecs = embedder.embed_many([doc.full_text(), gen.query_text])
        enc = enc_score(vecs[0], vecs[1])
        sm = bm25_softmax_score(index, gen.query_text, gen.doc_id)
        out.append(
            ScoredQuery(
                generation=gen,
                mean_logprob=mlp,
                bm25_softmax=sm,
                enc_score=enc,
                combined=w_enc * enc + w_bm25 * sm,
            )
        )
    return out


class PointwiseScorer(Protocol):
    """Standalone relevance of (query, document text) pairs; higher is more
    relevant. Any strictly monotone convention is acceptable.
    """

    def score_pairs(self, pairs: list[tuple[str, str]]) -> list[float]: ...


class HttpPointwiseScorer:
    """Client for the scorer wire contract:
    POST {base}/score  {"pairs": [{"query": q, "doc": d}, ..]} -> {"scores": [..]}
    """

    def __init__(self, base_url: str, timeout: float = 120.0, batch_size: int = 32):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.batch_size = batch_size
        self._session = requests.Session()

    def score_pairs(self, pairs: list[tuple[str, str]]) -> list[float]:
        scores: list[float] = []
        for start in range(0, len(pairs), self.batch_size):
            batch = pairs[start : start + self.batch_size]
            body = {"pairs": [{"query": q, "doc": d} for q, d in batch]}
            try:
                resp = self._session.post(
                    f"{self.base_url}/score", json=body, timeout=self.timeout
                )
                resp.raise_for_status()
                payload = resp.json()
            except requests.RequestException as exc:
                raise BackendError(f"scorer request failed: {exc}", retryable=True)
            got = payload.get("scores")
            if got is None or len(got) != len(batch):
                raise BackendError(
                    f"scorer returned {0 if got is None else len(got)} scores "
                    f"for {len(batch)} pairs"
                )
            scores.extend(float(s) for s in got)
        return scores


class LocalCombinedScorer:
    """Deterministic pointwise scorer for mock pipelines: resolves the
    document back to its corpus id by exact text match and returns the
    combined score; unknown documents fall back to the encoder score alone.
    """

    def __init__(
        self,
        corpus: Corpus,
        index: Bm25Index,
        embedder,
        w_enc: float = 0.5,
        w_bm25: float = 0.5,
    ):
        self.corpus = corpus
        self.index = index
        self.embedder = embedder
        self.w_enc = w_enc
        self.w_bm25 = w_bm25
        self._by_text = {doc.full_text(): doc_id for doc_id, doc in corpus.items()}
        self.unresolved = 0

    def score_pairs(self, pairs: list[tuple[str, str]]) -> list[float]:
        scores = []
        for query_text, doc_text in pairs:
            if not query_text.strip():
                scores.append(0.0)
                continue
            doc_id = self._by_text.get(doc_text)
            if doc_id is None:
                self.unresolved += 1
                vecs = self.embedder.embed_many([doc_text, query_text])
                scores.append(enc_score(vecs[0], vecs[1]) * self.w_enc)
                continue
            scores.append(
                combined_score(
                    self.corpus[doc_id],
                    query_text,
                    self.index,
                    self.embedder,
                    self.w_enc,
                    self.w_bm25,
                )
            )
        return scores


def annotate_reranker_score(item: ScoredQuery, score: float) -> ScoredQuery:
    return replace(item, reranker_score=score)


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
