"""Load and validate BEIR-format corpora, queries, qrels, and relevant pairs.

File layouts:
  corpus:  JSON lines, one object per line with `_id`, optional `title`, `text`
  queries: JSON lines with `_id`, `text`
  qrels:   TSV `query-id<TAB>corpus-id<TAB>score`, optional header detected

Loaded structures are plain immutable records in dicts and are safe to share
across worker threads.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import DataFormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def full_text(self) -> str:
        """Title and body concatenated; this is the text scored downstream."""
        if self.title:
            return f"{self.title} {self.text}"
        return self.text


@dataclass(frozen=True)
class Query:
    id: str
    text: str


@dataclass(frozen=True)
class Qrel:
    query_id: str
    doc_id: str
    grade: int


@dataclass(frozen=True)
class RelevantPair:
    doc: Document
    query: Query


Corpus = dict[str, Document]
QuerySet = dict[str, Query]
# qrels keyed (query_id, doc_id); values are grades >= 0
QrelSet = dict[tuple[str, str], int]


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus. Duplicate ids and malformed lines are errors."""
    corpus: Corpus = {}
    for line_no, obj in _iter_jsonl(path):
        doc_id = obj.get("_id")
        if not doc_id or not isinstance(doc_id, str):
            raise DataFormatError(f"{path}:{line_no}: missing or non-string `_id`")
        if "text" not in obj:
            raise DataFormatError(f"{path}:{line_no}: missing `text` field")
        text = str(obj["text"])
        if not text.strip():
            raise DataFormatError(f"{path}:{line_no}: empty `text` for doc {doc_id!r}")
        if doc_id in corpus:
            raise DataFormatError(f"{path}:{line_no}: duplicate document id {doc_id!r}")
        corpus[doc_id] = Document(id=doc_id, title=str(obj.get("title", "") or ""), text=text)
    log.info("loaded %d documents from %s", len(corpus), path)
    return corpus


def load_queries(path: str | Path) -> QuerySet:
    queries: QuerySet = {}
    for line_no, obj in _iter_jsonl(path):
        qid = obj.get("_id")
        if not qid or not isinstance(qid, str):
            raise DataFormatError(f"{path}:{line_no}: missing or non-string `_id`")
        text = str(obj.get("text", ""))
        if not text.strip():
            raise DataFormatError(f"{path}:{line_no}: empty `text` for query {qid!r}")
        if qid in queries:
            raise DataFormatError(f"{path}:{line_no}: duplicate query id {qid!r}")
        queries[qid] = Query(id=qid, text=text)
    log.info("loaded %d queries from %s", len(queries), path)
    return queries


def load_qrels(
    path: str | Path,
    queries: QuerySet | None = None,
    corpus: Corpus | None = None,
) -> QrelSet:
    """Load TSV qrels. When `queries`/`corpus` are given, dangling query ids
    are errors and dangling doc ids are warnings (public qrels occasionally
    reference pruned documents).
    """
    qrels: QrelSet = {}
    dangling_docs = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise DataFormatError(
                    f"{path}:{line_no}: expected 3 tab-separated columns, got {len(parts)}"
                )
            qid, doc_id, grade_str = parts[0], parts[1], parts[2]
            if line_no == 1 and _looks_like_header(grade_str):
                continue
            try:
                grade = int(grade_str)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{line_no}: non-integer grade {grade_str!r}"
                ) from None
            if grade < 0:
                raise DataFormatError(f"{path}:{line_no}: negative grade {grade}")
            key = (qid, doc_id)
            if key in qrels:
                raise DataFormatError(
                    f"{path}:{line_no}: duplicate qrel for ({qid!r}, {doc_id!r})"
                )
            if queries is not None and qid not in queries:
                raise DataFormatError(
                    f"{path}:{line_no}: qrel references unknown query id {qid!r}"
                )
            if corpus is not None and doc_id not in corpus:
                dangling_docs += 1
            qrels[key] = grade
    if dangling_docs:
        log.warning("%s: %d qrel lines reference doc ids absent from the corpus", path, dangling_docs)
    log.info("loaded %d qrels from %s", len(qrels), path)
    return qrels


def positive_pairs(qrels: QrelSet) -> list[tuple[str, str]]:
    """(query_id, doc_id) for every qrel with grade >= 1, in file order."""
    return [key for key, grade in qrels.items() if grade >= 1]


def sample_relevant_pairs(
    corpus: Corpus,
    queries: QuerySet,
    qrels: QrelSet,
    n: int,
    seed: int,
) -> list[RelevantPair]:
    """Sample up to `n` positive (document, query) pairs without replacement
    over documents: at most one pair per document, so the sample prefers
    covering distinct documents over repeating queries. Deterministic per seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    by_doc: dict[str, list[str]] = {}
    for (qid, doc_id), grade in sorted(qrels.items()):
        if grade < 1:
            continue
        if doc_id not in corpus or qid not in queries:
            continue
        by_doc.setdefault(doc_id, []).append(qid)
    if not by_doc:
        raise DataFormatError("no positive qrels resolvable against corpus and queries")

    rng = random.Random(seed)
    doc_ids = sorted(by_doc)
    rng.shuffle(doc_ids)
    pairs = []
    for doc_id in doc_ids[: min(n, len(doc_ids))]:
        qid = rng.choice(by_doc[doc_id])
        pairs.append(RelevantPair(doc=corpus[doc_id], query=queries[qid]))
    return pairs


def _iter_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{line_no}: malformed JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{line_no}: expected a JSON object")
            yield line_no, obj


def _looks_like_header(grade_field: str) -> bool:
    try:
        int(grade_field)
        return False
    except ValueError:
        return True
