"""Retrieval evaluation: BM25 first stage, pointwise reranking, nDCG/recall,
reranker-training-file export, and the filter-ratio ablation driver.

nDCG follows the trec_eval/BEIR convention: gain 2^rel - 1, discount
log2(rank + 1), ideal ordering from the query's own judgments, and queries
without positive judgments excluded from the mean (reported separately).
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bm25 import Bm25Index, bm25_retrieve_topk
from .corpus import Corpus, QrelSet, QuerySet
from .errors import BackendError
from .filters import filter_reranker_topk, subsample
from .scoring import PointwiseScorer, ScoredQuery
from .trecrun import Run, RunEntry, group_by_query

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    metric: str
    cutoff: int
    per_query: dict[str, float]
    mean: float
    excluded_query_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "cutoff": self.cutoff,
            "mean": self.mean,
            "per_query": dict(sorted(self.per_query.items())),
            "excluded": list(self.excluded_query_ids),
        }


def first_stage_retrieve(
    index: Bm25Index, queries: QuerySet, k: int = 1000, tag: str = "bm25"
) -> Run:
    """BM25 top-k per query, materialized as a TREC run. Queries matching no
    document contribute no entries.
    """
    entries: Run = []
    for qid in sorted(queries):
        hits = bm25_retrieve_topk(index, queries[qid].text, k)
        for rank, (doc_id, score) in enumerate(hits, start=1):
            entries.append(RunEntry(qid, doc_id, rank, score, tag))
    return entries


def rerank(
    run: Run,
    pointwise_scorer: PointwiseScorer,
    corpus: Corpus,
    queries: QuerySet,
    top_k: int = 100,
    tag: str = "rerank",
    max_attempts: int = 3,
) -> Run:
    """Re-score the top_k candidates per query with the pointwise scorer and
    re-sort them (descending, ties by ascending doc_id). Candidates beyond
    top_k keep their relative order below the reranked block; their scores are
    shifted under the block minimum so ranks stay monotone. A pair whose
    scoring fails after retries keeps its first-stage score.
    """
    out: Run = []
    failures = 0
    for qid, entries in group_by_query(run).items():
        query_text = queries[qid].text
        block, tail = entries[:top_k], entries[top_k:]
        pairs = [(query_text, corpus[e.doc_id].full_text()) for e in block]
        try:
            scores = [float(s) for s in pointwise_scorer.score_pairs(pairs)]
        except BackendError:
            scores = []
            for entry, pair in zip(block, pairs):
                score = None
                for attempt in range(max_attempts):
                    try:
                        score = pointwise_scorer.score_pairs([pair])[0]
                        break
                    except BackendError as exc:
                        if not exc.retryable or attempt == max_attempts - 1:
                            break
                if score is None:
                    failures += 1
                    score = entry.score
                scores.append(score)
        reranked = sorted(
            zip(block, scores), key=lambda pair_score: (-pair_score[1], pair_score[0].doc_id)
        )
        floor = min(scores) if scores else 0.0
        rank = 0
        for entry, score in reranked:
            rank += 1
            out.append(replace(entry, rank=rank, score=score, tag=tag))
        for i, entry in enumerate(tail):
            rank += 1
            out.append(replace(entry, rank=rank, score=floor - (i + 1) * 1e-6, tag=tag))
    if failures:
        log.warning("rerank: %d pairs kept their first-stage score after scorer failures", failures)
    return out


def _positive_grades(qrels: QrelSet) -> dict[str, dict[str, int]]:
    positives: dict[str, dict[str, int]] = {}
    for (qid, doc_id), grade in qrels.items():
        if grade >= 1:
            positives.setdefault(qid, {})[doc_id] = grade
    return positives


def ndcg_at_k(run: Run, qrels: QrelSet, k: int = 10) -> MetricReport:
    """Exponential-gain nDCG at cutoff k. Queries with at least one positive
    judgment but absent from the run score 0; queries with no positive
    judgments are excluded from the mean and listed separately.
    """
    positives = _positive_grades(qrels)
    grouped = group_by_query(run)
    judged_queries = {qid for qid, _ in qrels}
    excluded = sorted((set(grouped) | judged_queries) - set(positives))

    per_query: dict[str, float] = {}
    for qid, grades in positives.items():
        dcg = 0.0
        for entry in grouped.get(qid, [])[:k]:
            rel = grades.get(entry.doc_id, 0)
            if rel > 0:
                dcg += (2**rel - 1) / math.log2(entry.rank + 1)
        ideal = sorted(grades.values(), reverse=True)[:k]
        idcg = sum((2**rel - 1) / math.log2(i + 2) for i, rel in enumerate(ideal))
        per_query[qid] = dcg / idcg
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricReport("ndcg", k, per_query, mean, tuple(excluded))


def recall_at_k(run: Run, qrels: QrelSet, k: int) -> MetricReport:
    """Fraction of a query's relevant documents present in its top-k."""
    positives = _positive_grades(qrels)
    grouped = group_by_query(run)
    judged_queries = {qid for qid, _ in qrels}
    excluded = sorted((set(grouped) | judged_queries) - set(positives))

    per_query: dict[str, float] = {}
    for qid, grades in positives.items():
        top = {entry.doc_id for entry in grouped.get(qid, [])[:k]}
        per_query[qid] = len(top & set(grades)) / len(grades)
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricReport("recall", k, per_query, mean, tuple(excluded))


def export_training_file(
    kept: list[ScoredQuery],
    index: Bm25Index,
    corpus: Corpus,
    n_negatives: int,
    seed: int,
    path: str | Path,
    candidate_pool: int = 1000,
) -> int:
    """Reranker training data: per kept query one positive line for its source
    document and `n_negatives` negatives drawn from the query's BM25 top
    candidates (never the source document), topped up from the corpus at
    random if the candidate pool is short. JSONL fields: query, doc_id, label.
    """
    if not kept:
        raise ValueError("no queries to export")
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    rng = random.Random(seed)
    all_doc_ids = sorted(corpus)
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in kept:
            fh.write(
                json.dumps(
                    {"query": item.query_text, "doc_id": item.doc_id, "label": 1},
                    ensure_ascii=False,
                )
                + "\n"
            )
            written += 1
            candidates = [
                doc_id
                for doc_id, _ in bm25_retrieve_topk(index, item.query_text, candidate_pool)
                if doc_id != item.doc_id
            ]
            if len(candidates) >= n_negatives:
                negatives = rng.sample(candidates, n_negatives)
            else:
                negatives = list(candidates)
                fill_pool = [
                    d for d in all_doc_ids if d != item.doc_id and d not in set(negatives)
                ]
                negatives.extend(rng.sample(fill_pool, n_negatives - len(negatives)))
            for doc_id in negatives:
                fh.write(
                    json.dumps(
                        {"query": item.query_text, "doc_id": doc_id, "label": 0},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                written += 1
    return written


@dataclass
class AblationRow:
    pool_size: int
    kept: int
    training_path: str
    ndcg10: float | None = None


@dataclass
class AblationBundle:
    """Everything the ablation driver needs besides the generations: scoring
    context for the reranker-topk filter, export settings, and an optional
    external train-and-evaluate hook returning nDCG@10 for a training file.
    """

    corpus: Corpus
    index: Bm25Index
    scorer: PointwiseScorer
    out_dir: Path
    n_negatives: int = 1
    seed: int = 0
    eval_fn: object = None
    scored_cache: dict = field(default_factory=dict)


def ablate_filter(
    generations: list[ScoredQuery],
    sizes: list[int],
    keep: int,
    bundle: AblationBundle,
) -> list[AblationRow]:
    """For each pool size: subsample the generations, keep the reranker top-K,
    export a training file, and evaluate through the external hook when one is
    wired (otherwise the nDCG column stays empty).
    """
    for size in sizes:
        if size > len(generations):
            raise ValueError(f"pool size {size} exceeds {len(generations)} generations")
        if keep > size:
            raise ValueError(f"keep={keep} exceeds pool size {size}")
    rows = []
    for size in sizes:
        pool = subsample(generations, size, bundle.seed)
        kept_items = filter_reranker_topk(pool, keep, bundle.scorer, bundle.corpus)
        path = bundle.out_dir / f"train_pool{size}.jsonl"
        export_training_file(
            kept_items,
            bundle.index,
            bundle.corpus,
            n_negatives=bundle.n_negatives,
            seed=bundle.seed,
            path=path,
        )
        row = AblationRow(pool_size=size, kept=len(kept_items), training_path=str(path))
        if bundle.eval_fn is not None:
            row.ndcg10 = float(bundle.eval_fn(path, size))
        rows.append(row)
    return rows


def write_ablation_csv(path: str | Path, rows: list[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pool_size,kept,ndcg10\n")
        for row in rows:
            ndcg = "" if row.ndcg10 is None else f"{row.ndcg10:.6f}"
            fh.write(f"{row.pool_size},{row.kept},{ndcg}\n")
