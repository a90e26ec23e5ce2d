"""Prompt templates and rendering.

Template files are UTF-8 text: a YAML front-matter header (`id`,
`max_examples`, `stop`, and `example_format` for few-shot templates), a line
containing exactly `---`, then the body. The body must contain `{document}`
exactly once and `{examples}` when `max_examples > 0`. Literal braces in a
body must be doubled (`{{`, `}}`); an unknown placeholder is an error at
render time.

Bundled templates: inpars-vanilla, inpars-gbq, inpars-plus, cot-agent, and
one targeted template per evaluation dataset (targeted-scifact,
targeted-nfcorpus, targeted-arguana, targeted-trec-covid). The vanilla and
GBQ few-shot example pairs ship in templates/fewshot-msmarco.jsonl.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator

import yaml

from .corpus import Corpus, Document, RelevantPair
from .errors import DataFormatError

BUNDLED_TEMPLATE_IDS = (
    "inpars-vanilla",
    "inpars-gbq",
    "inpars-plus",
    "cot-agent",
    "targeted-scifact",
    "targeted-nfcorpus",
    "targeted-arguana",
    "targeted-trec-covid",
)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str
    example_format: str
    stop_sequences: tuple[str, ...]
    max_examples: int


@dataclass(frozen=True)
class Prompt:
    doc_id: str
    text: str
    template_id: str
    stop_sequences: tuple[str, ...]


@dataclass(frozen=True)
class FewshotExample:
    document: str
    query: str
    good_query: str | None = None


@dataclass(frozen=True)
class CotProfile:
    """Instruction profile for the agent-style reasoning prompt."""

    role: str = (
        "You are a skilled research assistant building a search evaluation set."
    )
    reasoning_cue: str = "Let's think step by step."
    answer_marker: str = "Query:"
    stop_sequences: tuple[str, ...] = ("\n\n",)


def parse_template(text: str, source: str = "<string>") -> PromptTemplate:
    lines = text.split("\n")
    try:
        sep = lines.index("---")
    except ValueError:
        raise DataFormatError(f"{source}: missing `---` separator") from None
    header = yaml.safe_load("\n".join(lines[:sep])) or {}
    if not isinstance(header, dict):
        raise DataFormatError(f"{source}: front matter must be key: value lines")
    body = "\n".join(lines[sep + 1 :])

    template_id = header.get("id")
    if not template_id:
        raise DataFormatError(f"{source}: front matter missing `id`")
    max_examples = int(header.get("max_examples", 0))
    stop = header.get("stop", [])
    if isinstance(stop, str):
        stop = [stop]
    example_format = header.get("example_format", "")

    if body.count("{document}") != 1:
        raise DataFormatError(
            f"{source}: body must contain {{document}} exactly once "
            f"(found {body.count('{document}')})"
        )
    if max_examples > 0 and "{examples}" not in body:
        raise DataFormatError(
            f"{source}: max_examples={max_examples} but body has no {{examples}}"
        )
    if max_examples > 0 and not example_format:
        raise DataFormatError(
            f"{source}: max_examples={max_examples} requires `example_format`"
        )
    return PromptTemplate(
        id=str(template_id),
        body=body,
        example_format=example_format,
        stop_sequences=tuple(str(s) for s in stop),
        max_examples=max_examples,
    )


def load_template(path: str | Path) -> PromptTemplate:
    with open(path, encoding="utf-8") as fh:
        return parse_template(fh.read(), source=str(path))


def load_bundled_template(template_id: str) -> PromptTemplate:
    if template_id not in BUNDLED_TEMPLATE_IDS:
        raise DataFormatError(
            f"unknown bundled template {template_id!r}; available: "
            + ", ".join(BUNDLED_TEMPLATE_IDS)
        )
    text = resources.files("qgen").joinpath(f"templates/{template_id}.txt").read_text("utf-8")
    return parse_template(text, source=f"bundled:{template_id}")


def resolve_template(name_or_path: str) -> PromptTemplate:
    """Bundled template id, or a path to a template file."""
    if name_or_path in BUNDLED_TEMPLATE_IDS:
        return load_bundled_template(name_or_path)
    if Path(name_or_path).exists():
        return load_template(name_or_path)
    raise DataFormatError(f"template {name_or_path!r} is neither bundled nor a file")


def load_static_examples() -> list[FewshotExample]:
    """The bundled web-search-style example pairs used by the fixed-prefix
    templates. GBQ treats `query` as the bad question and `good_query` as the
    hand-written good one.
    """
    text = resources.files("qgen").joinpath("templates/fewshot-msmarco.jsonl").read_text("utf-8")
    examples = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        examples.append(
            FewshotExample(
                document=obj["document"],
                query=obj["query"],
                good_query=obj.get("good_query"),
            )
        )
    return examples


def sample_fewshot_examples(
    pairs: list[RelevantPair],
    k: int,
    seed: int,
    exclude_doc_id: str | None = None,
) -> list[FewshotExample]:
    """Draw k in-distribution examples without replacement, deterministic per
    seed. The target document can be excluded to prevent self-inclusion.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    eligible = [p for p in pairs if p.doc.id != exclude_doc_id]
    if k > len(eligible):
        raise ValueError(
            f"requested {k} few-shot examples but only {len(eligible)} pairs available"
        )
    rng = random.Random(seed)
    chosen = rng.sample(eligible, k)
    return [
        FewshotExample(document=p.doc.full_text(), query=p.query.text) for p in chosen
    ]


def _render_examples(template: PromptTemplate, examples: list[FewshotExample]) -> str:
    blocks = []
    for i, ex in enumerate(examples, start=1):
        mapping = {
            "n": i,
            "example_document": ex.document,
            "example_query": ex.query,
            "bad_query": ex.query,
        }
        if ex.good_query is not None:
            mapping["good_query"] = ex.good_query
        try:
            blocks.append(template.example_format.format(**mapping))
        except KeyError as exc:
            raise DataFormatError(
                f"template {template.id!r}: example placeholder {exc} has no value"
            ) from None
    return "".join(blocks)


def build_prompt(
    template: PromptTemplate,
    examples: list[FewshotExample],
    doc: Document,
    extra: dict[str, str] | None = None,
) -> Prompt:
    """Render a prompt. Every placeholder must resolve or this raises."""
    if len(examples) > template.max_examples:
        raise ValueError(
            f"template {template.id!r} allows {template.max_examples} examples, "
            f"got {len(examples)}"
        )
    mapping = {"examples": _render_examples(template, examples), "document": doc.full_text()}
    if extra:
        mapping.update(extra)
    try:
        text = template.body.format(**mapping)
    except (KeyError, IndexError) as exc:
        raise DataFormatError(
            f"template {template.id!r}: unfilled placeholder {exc}"
        ) from None
    return Prompt(
        doc_id=doc.id,
        text=text,
        template_id=template.id,
        stop_sequences=template.stop_sequences,
    )


def build_cot_prompt(doc: Document, profile: CotProfile | None = None) -> Prompt:
    """Agent-style prompt: stepwise document analysis, then one query after
    the answer marker. Stop sequences terminate generation after the query.
    """
    profile = profile or CotProfile()
    if not profile.role.strip():
        raise ValueError("CoT profile needs non-empty role text")
    if not profile.reasoning_cue.strip() or not profile.answer_marker.strip():
        raise ValueError("CoT profile needs a reasoning cue and an answer marker")
    template = load_bundled_template("cot-agent")
    prompt = build_prompt(
        template,
        [],
        doc,
        extra={
            "role": profile.role,
            "reasoning_cue": profile.reasoning_cue,
            "answer_marker": profile.answer_marker,
        },
    )
    stops = profile.stop_sequences or template.stop_sequences
    return Prompt(
        doc_id=prompt.doc_id,
        text=prompt.text,
        template_id=template.id,
        stop_sequences=tuple(stops),
    )


ExamplePolicy = Callable[[Document], list[FewshotExample]]


def static_example_policy(examples: list[FewshotExample]) -> ExamplePolicy:
    return lambda doc: examples


def sampled_example_policy(
    pairs: list[RelevantPair], k: int, seed: int
) -> ExamplePolicy:
    """Per-document deterministic sample excluding the target document."""

    def policy(doc: Document) -> list[FewshotExample]:
        return sample_fewshot_examples(pairs, k, seed, exclude_doc_id=doc.id)

    return policy


def build_prompts_parallel(
    template: PromptTemplate,
    example_policy: ExamplePolicy,
    corpus: Corpus,
    workers: int = 1,
) -> Iterator[Prompt]:
    """One prompt per corpus document, emitted in document-id order. Building
    is pure, so the result set is independent of `workers`.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    docs = [corpus[doc_id] for doc_id in sorted(corpus)]

    def build_one(doc: Document) -> Prompt:
        try:
            return build_prompt(template, example_policy(doc), doc)
        except Exception as exc:
            raise type(exc)(f"doc {doc.id!r}: {exc}") from exc

    if workers == 1:
        for doc in docs:
            yield build_one(doc)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(build_one, docs)


def cycle_prompts(prompts: list[Prompt], n: int) -> Iterator[Prompt]:
    """Round-robin repetition so more generations than documents can be
    requested; the full prompt list repeats in order until n are emitted.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if not prompts and n > 0:
        raise ValueError("cannot cycle an empty prompt list")
    emitted = 0
    while emitted < n:
        for prompt in prompts:
            if emitted >= n:
                return
            yield prompt
            emitted += 1
