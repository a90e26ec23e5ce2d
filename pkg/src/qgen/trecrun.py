"""TREC run file interchange: `qid Q0 docid rank score tag`, space separated.

Scores are serialized with 6 fractional digits; write/read round-trips exactly
for scores representable with that precision. Ranks are 1-based and must be
contiguous per query with non-increasing scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import DataFormatError


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


Run = list[RunEntry]


def validate_run(entries: Run) -> None:
    """Check per-query rank contiguity and score monotonicity."""
    expected_rank: dict[str, int] = {}
    last_score: dict[str, float] = {}
    for e in entries:
        want = expected_rank.get(e.query_id, 1)
        if e.rank != want:
            raise DataFormatError(
                f"query {e.query_id!r}: expected rank {want}, got {e.rank}"
            )
        if e.query_id in last_score and e.score > last_score[e.query_id]:
            raise DataFormatError(
                f"query {e.query_id!r}: score increases at rank {e.rank} "
                f"({last_score[e.query_id]} -> {e.score})"
            )
        expected_rank[e.query_id] = want + 1
        last_score[e.query_id] = e.score


def write_run(path: str | Path, entries: Run) -> None:
    validate_run(entries)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score:.6f} {e.tag}\n")


def read_run(path: str | Path) -> Run:
    entries: Run = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(
                    f"{path}:{line_no}: expected 6 fields, got {len(parts)}"
                )
            qid, _q0, doc_id, rank_str, score_str, tag = parts
            try:
                rank = int(rank_str)
                score = float(score_str)
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: bad rank or score") from None
            entries.append(RunEntry(qid, doc_id, rank, score, tag))
    validate_run(entries)
    return entries


def group_by_query(entries: Run) -> dict[str, list[RunEntry]]:
    grouped: dict[str, list[RunEntry]] = {}
    for e in entries:
        grouped.setdefault(e.query_id, []).append(e)
    return grouped
