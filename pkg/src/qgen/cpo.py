"""Preference-triplet construction and the contrastive preference loss.

A triplet candidate carries three queries for one relevant document: the
reference (the human query from the qrels), a teacher generation, and a
student generation, each scored against the document with the blended
relevance score. Candidates passing the margin filter yield one preference
triplet: highest score becomes the preferred output, lowest the dispreferred.

The loss here is the verifiable pure-math half of preference training. The
preference term is -log sigmoid(beta * (logp_w - logp_l)) against a uniform
prior (no reference-policy term), plus a behavior-cloning -logp_w term. Actual
weight updates belong to an external trainer consuming the triplet file.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .corpus import Query, RelevantPair
from .errors import DataFormatError
from .filters import filter_margin
from .genclient import Generation, GenerationParams, generate
from .prompts import ExamplePolicy, PromptTemplate, build_prompt
from .scoring import combined_score, sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TripletCandidate:
    pair: RelevantPair
    student_query: Generation
    teacher_query: Generation
    reference_query: Query
    s_student: float
    s_teacher: float
    s_reference: float


@dataclass(frozen=True)
class PreferenceTriplet:
    input: str
    preferred: str
    dispreferred: str
    preferred_score: float
    dispreferred_score: float
    source: str

    def __post_init__(self):
        if self.preferred_score < self.dispreferred_score:
            raise ValueError(
                f"preferred_score {self.preferred_score} < dispreferred_score "
                f"{self.dispreferred_score} (doc {self.source!r})"
            )
        if self.preferred == self.dispreferred:
            raise ValueError(f"preferred and dispreferred texts identical (doc {self.source!r})")


@dataclass(frozen=True)
class CpoParams:
    """beta scales the log-prob difference inside the preference sigmoid. The
    uniform prior of the objective has no runtime representation; it is
    embodied by the absence of a reference-policy term.
    """

    beta: float = 0.1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


# trust order used for tie-breaking; higher rank wins the preferred slot,
# lower rank the dispreferred slot
_TRUST = {"reference": 2, "teacher": 1, "student": 0}


def select_preference(candidate: TripletCandidate) -> tuple[tuple[str, float], tuple[str, float]]:
    """(preferred, dispreferred) as (text, score). Exact argmax/argmin over
    the three scores; ties go to the higher-trust source for preferred and
    the lower-trust source for dispreferred.
    """
    entries = [
        (candidate.s_reference, _TRUST["reference"], candidate.reference_query.text),
        (candidate.s_teacher, _TRUST["teacher"], candidate.teacher_query.query_text),
        (candidate.s_student, _TRUST["student"], candidate.student_query.query_text),
    ]
    texts = {text for _, _, text in entries}
    if len(texts) == 1:
        raise ValueError(
            f"degenerate candidate: all three queries identical (doc {candidate.pair.doc.id!r})"
        )
    preferred = max(entries, key=lambda e: (e[0], e[1]))
    dispreferred = min(entries, key=lambda e: (e[0], e[1]))
    return (preferred[2], preferred[0]), (dispreferred[2], dispreferred[0])


@dataclass
class TripletStats:
    pairs: int = 0
    emitted: int = 0
    dropped_margin: int = 0
    dropped_identical: int = 0
    failed: int = 0


def build_triplet_candidates(
    pairs: list[RelevantPair],
    student_backend,
    teacher_backend,
    template: PromptTemplate,
    index,
    embedder,
    example_policy: ExamplePolicy | None = None,
    params: GenerationParams | None = None,
    w_enc: float = 0.5,
    w_bm25: float = 0.5,
    stats: TripletStats | None = None,
    prompt_sink: dict[str, str] | None = None,
) -> list[TripletCandidate]:
    """Generate teacher and student queries for each pair and score all three
    queries against the document. Per-pair backend failures are recorded and
    skipped; empty generations score 0 and fall to the margin filter. When
    `prompt_sink` is given it collects doc_id -> prompt text.
    """
    params = params or GenerationParams()
    stats = stats if stats is not None else TripletStats()
    candidates = []
    for seq, pair in enumerate(pairs):
        stats.pairs += 1
        examples = example_policy(pair.doc) if example_policy else []
        try:
            prompt = build_prompt(template, examples, pair.doc)
            if prompt_sink is not None:
                prompt_sink[pair.doc.id] = prompt.text
            student = generate(prompt, params, student_backend, seq=seq)
            teacher = generate(prompt, params, teacher_backend, seq=seq)

            def score(query_text: str) -> float:
                return combined_score(pair.doc, query_text, index, embedder, w_enc, w_bm25)

            candidates.append(
                TripletCandidate(
                    pair=pair,
                    student_query=student,
                    teacher_query=teacher,
                    reference_query=pair.query,
                    s_student=score(student.query_text),
                    s_teacher=score(teacher.query_text),
                    s_reference=score(pair.query.text),
                )
            )
        except Exception as exc:
            stats.failed += 1
            log.warning("triplet candidate for doc %s failed: %s", pair.doc.id, exc)
    return candidates


def triplets_from_candidates(
    candidates: list[TripletCandidate],
    prompts_by_doc: dict[str, str] | None = None,
    L: float = 0.3,
    H: float = 0.7,
    stats: TripletStats | None = None,
) -> list[PreferenceTriplet]:
    stats = stats if stats is not None else TripletStats()
    surviving = filter_margin(candidates, L, H)
    stats.dropped_margin += len(candidates) - len(surviving)
    triplets = []
    for cand in surviving:
        try:
            (pref_text, pref_score), (disp_text, disp_score) = select_preference(cand)
        except ValueError:
            stats.dropped_identical += 1
            continue
        if pref_text == disp_text:
            stats.dropped_identical += 1
            continue
        prompt_text = (prompts_by_doc or {}).get(cand.pair.doc.id, "")
        triplets.append(
            PreferenceTriplet(
                input=prompt_text,
                preferred=pref_text,
                dispreferred=disp_text,
                preferred_score=pref_score,
                dispreferred_score=disp_score,
                source=cand.pair.doc.id,
            )
        )
        stats.emitted += 1
    return triplets


def build_triplets(
    pairs: list[RelevantPair],
    student_backend,
    teacher_backend,
    template: PromptTemplate,
    index,
    embedder,
    example_policy: ExamplePolicy | None = None,
    params: GenerationParams | None = None,
    L: float = 0.3,
    H: float = 0.7,
    w_enc: float = 0.5,
    w_bm25: float = 0.5,
    stats: TripletStats | None = None,
) -> list[PreferenceTriplet]:
    """End-to-end triplet construction: generate, score, margin-filter, and
    select preferred/dispreferred. The stored input is the generation prompt
    for the document, so an external trainer optimizes the same conditional
    this pipeline samples from.
    """
    stats = stats if stats is not None else TripletStats()
    prompts_by_doc: dict[str, str] = {}
    candidates = build_triplet_candidates(
        pairs,
        student_backend,
        teacher_backend,
        template,
        index,
        embedder,
        example_policy=example_policy,
        params=params,
        w_enc=w_enc,
        w_bm25=w_bm25,
        stats=stats,
        prompt_sink=prompts_by_doc,
    )
    return triplets_from_candidates(candidates, prompts_by_doc, L=L, H=H, stats=stats)


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite input {v}")


def cpo_prefer_loss(logp_w: float, logp_l: float, beta: float) -> float:
    """-log sigmoid(beta * (logp_w - logp_l)), via the stable softplus
    identity -log sigmoid(z) = log(1 + exp(-z)).
    """
    _check_finite(logp_w, logp_l, beta)
    if beta <= 0:
        raise ValueError("beta must be > 0")
    z = beta * (logp_w - logp_l)
    # softplus(-z) = max(-z, 0) + log1p(exp(-|z|))
    return max(-z, 0.0) + math.log1p(math.exp(-abs(z)))


def cpo_nll_loss(logp_w: float) -> float:
    """Behavior-cloning term: negative log-likelihood of the preferred output."""
    _check_finite(logp_w)
    if logp_w > 0:
        raise ValueError(f"log-probability must be <= 0, got {logp_w}")
    return -logp_w


def cpo_total_loss(logp_w: float, logp_l: float, beta: float) -> float:
    return cpo_prefer_loss(logp_w, logp_l, beta) + cpo_nll_loss(logp_w)


def cpo_loss_grad(logp_w: float, logp_l: float, beta: float) -> tuple[float, float]:
    """Analytic partials of the total loss with respect to (logp_w, logp_l):
    with delta = logp_w - logp_l,
      d/d logp_w = -beta * sigmoid(-beta * delta) - 1
      d/d logp_l =  beta * sigmoid(-beta * delta)
    Their sum is -1 everywhere: the preference partials cancel and the
    behavior-cloning term contributes the -1.
    """
    _check_finite(logp_w, logp_l, beta)
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if logp_w > 0:
        raise ValueError(f"log-probability must be <= 0, got {logp_w}")
    s = sigmoid(-beta * (logp_w - logp_l))
    return (-beta * s - 1.0, beta * s)


def write_triplets(path: str | Path, triplets: list[PreferenceTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(
                json.dumps(
                    {
                        "doc_id": t.source,
                        "prompt": t.input,
                        "chosen": t.preferred,
                        "rejected": t.dispreferred,
                        "chosen_score": t.preferred_score,
                        "rejected_score": t.dispreferred_score,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_triplets(path: str | Path) -> list[PreferenceTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    PreferenceTriplet(
                        input=obj["prompt"],
                        preferred=obj["chosen"],
                        dispreferred=obj["rejected"],
                        preferred_score=float(obj["chosen_score"]),
                        dispreferred_score=float(obj["rejected_score"]),
                        source=obj["doc_id"],
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad triplet record: {exc}") from None
    return out
