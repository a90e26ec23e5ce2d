"""Drive a completion backend with bounded concurrency and crash recovery.

Backends implement `complete(prompt_text, params, seq) -> Completion`. Two are
provided: `HttpBackend` for any OpenAI-compatible `/v1/completions` endpoint
(token log-probs required), and `MockBackend`, a deterministic stand-in for
hermetic runs.

The batch driver appends every finished generation to a JSONL checkpoint and
fsyncs before emitting it, so a killed run restarts where it left off: records
already checkpointed are skipped by sequence number, and the materialized
output (sorted by doc_id then seq) is identical to an uninterrupted run for a
deterministic backend.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import BackendError, DataFormatError
from .prompts import Prompt
from .textutil import content_words

log = logging.getLogger(__name__)

DEFAULT_ANSWER_MARKER = "Query:"


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 64
    temperature: float = 0.0
    top_p: float = 1.0
    stop_sequences: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class Completion:
    """Raw backend output: full text plus per-token log-probs. `tokens` must
    concatenate to `text` so spans can be mapped back to token indices.
    """

    text: str
    tokens: tuple[str, ...] | None
    token_logprobs: tuple[float, ...]


@dataclass(frozen=True)
class Generation:
    doc_id: str
    raw_text: str
    query_text: str
    token_logprobs: tuple[float, ...]
    backend_tag: str
    prompt_template_id: str
    seq: int = 0

    @property
    def degenerate(self) -> bool:
        return not self.query_text.strip()

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "query": self.query_text,
            "raw_text": self.raw_text,
            "log_probs": list(self.token_logprobs),
            "template": self.prompt_template_id,
            "backend": self.backend_tag,
            "seq": self.seq,
        }

    @staticmethod
    def from_record(obj: dict) -> "Generation":
        return Generation(
            doc_id=obj["doc_id"],
            raw_text=obj["raw_text"],
            query_text=obj["query"],
            token_logprobs=tuple(float(x) for x in obj["log_probs"]),
            backend_tag=obj["backend"],
            prompt_template_id=obj["template"],
            seq=int(obj["seq"]),
        )


class MockBackend:
    """Deterministic pseudo-generator: the query is `what ` plus the first
    `words` content words of the target document (after skipping `skip`),
    and token log-probs are -1/(i+1).

    The target document is recovered from the prompt as the text after its
    last `Document: ` label, minus the cue line bundled templates put after
    it; documents are assumed to be single-line, which holds for JSONL
    corpora without embedded newlines.

    With `noise_fraction` f > 0, the generation for sequence number i is
    replaced by a copy of the document exactly when floor((i+1)*f) exceeds
    floor(i*f), so any batch of N sequence numbers 0..N-1 contains exactly
    floor(f*N) copies, independent of concurrency and restarts.
    """

    def __init__(
        self,
        words: int = 3,
        skip: int = 0,
        prefix: str = "what ",
        noise_fraction: float = 0.0,
        tag: str = "mock",
    ):
        if not 0.0 <= noise_fraction <= 1.0:
            raise ValueError("noise_fraction must be in [0, 1]")
        self.words = words
        self.skip = skip
        self.prefix = prefix
        self.noise_fraction = noise_fraction
        self.tag = tag

    def _document_text(self, prompt_text: str) -> str:
        marker = "Document: "
        idx = prompt_text.rfind("\n" + marker)
        if idx >= 0:
            seg = prompt_text[idx + 1 + len(marker) :]
        elif prompt_text.startswith(marker):
            seg = prompt_text[len(marker) :]
        else:
            seg = prompt_text
        seg = seg.rstrip("\n")
        if "\n" in seg:
            seg = seg[: seg.rfind("\n")]
        return seg.strip()

    def _corrupt(self, seq: int) -> bool:
        f = self.noise_fraction
        return f > 0 and int((seq + 1) * f) > int(seq * f)

    def complete(self, prompt_text: str, params: GenerationParams, seq: int = 0) -> Completion:
        doc_text = self._document_text(prompt_text)
        if self._corrupt(seq):
            text = doc_text
        else:
            words = content_words(doc_text, limit=self.words, skip=self.skip)
            text = self.prefix + " ".join(words) if words else ""
        pieces = text.split(" ")
        tokens = tuple(p + " " for p in pieces[:-1]) + (pieces[-1],) if text else ()
        logprobs = tuple(-1.0 / (i + 1) for i in range(len(tokens)))
        return Completion(text=text, tokens=tokens, token_logprobs=logprobs)


class HttpBackend:
    """OpenAI-compatible completions client. Requests token log-probs and
    refuses responses without them. Per-request seed is params.seed + seq so
    repeated documents can still diversify under sampling.
    """

    def __init__(
        self,
        base_url: str | None = None,
        model: str = "default",
        api_key: str | None = None,
        timeout: float = 120.0,
        tag: str | None = None,
    ):
        base = base_url or os.environ.get("QGEN_API_BASE")
        if not base:
            raise BackendError("no backend base URL: pass base_url or set QGEN_API_BASE")
        self.base_url = base.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("QGEN_API_KEY")
        self.timeout = timeout
        self.tag = tag or f"http:{model}"
        self._session = requests.Session()

    def complete(self, prompt_text: str, params: GenerationParams, seq: int = 0) -> Completion:
        body = {
            "model": self.model,
            "prompt": prompt_text,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "stop": list(params.stop_sequences) or None,
            "logprobs": 1,
            "seed": params.seed + seq,
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(
                f"{self.base_url}/v1/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendError(f"completion request failed: {exc}", retryable=True)
        if resp.status_code >= 500:
            raise BackendError(f"backend returned {resp.status_code}", retryable=True)
        if resp.status_code != 200:
            raise BackendError(f"backend returned {resp.status_code}: {resp.text[:200]}")
        payload = resp.json()
        try:
            choice = payload["choices"][0]
            text = choice["text"]
        except (KeyError, IndexError):
            raise BackendError("malformed completion response: no choices[0].text") from None
        logprobs_block = choice.get("logprobs") or {}
        token_logprobs = logprobs_block.get("token_logprobs")
        if token_logprobs is None:
            raise BackendError(
                "backend returned no token log-probs; enable logprob capture "
                "(request field logprobs: 1)"
            )
        tokens = logprobs_block.get("tokens")
        return Completion(
            text=text,
            tokens=tuple(tokens) if tokens is not None else None,
            token_logprobs=tuple(float(x) for x in token_logprobs),
        )


def _truncate_at_stop(text: str, stops: tuple[str, ...]) -> str:
    cut = len(text)
    for stop in stops:
        if not stop:
            continue
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


def _extract_query_span(text: str, marker: str) -> tuple[int, int]:
    """Character span of the query inside `text`: after the last marker up to
    the next newline when a marker is present, otherwise the first line.
    Surrounding whitespace is excluded from the span.
    """
    idx = text.rfind(marker)
    if idx != -1:
        start = idx + len(marker)
    else:
        start = 0
    end = text.find("\n", start)
    if end == -1:
        end = len(text)
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end


def _align_logprobs(
    completion: Completion, start: int, end: int
) -> tuple[float, ...]:
    """Log-probs of the tokens overlapping [start, end) of completion.text."""
    if start >= end:
        return ()
    if completion.tokens is None:
        if start == 0 and end >= len(completion.text.rstrip()):
            return completion.token_logprobs
        raise BackendError(
            "backend reported no token strings; cannot align log-probs to the "
            "extracted query span"
        )
    kept = []
    pos = 0
    for token, lp in zip(completion.tokens, completion.token_logprobs):
        tok_start, tok_end = pos, pos + len(token)
        pos = tok_end
        if tok_start < end and tok_end > start:
            kept.append(lp)
        if tok_start >= end:
            break
    return tuple(kept)


def generate(
    prompt: Prompt,
    params: GenerationParams,
    backend,
    seq: int = 0,
    marker: str = DEFAULT_ANSWER_MARKER,
) -> Generation:
    """One completion: call the backend, truncate at the first stop sequence,
    extract the query span, and align log-probs to it. Empty extractions are
    kept and flagged by Generation.degenerate.
    """
    stops = tuple(dict.fromkeys(params.stop_sequences + prompt.stop_sequences))
    effective = GenerationParams(
        max_new_tokens=params.max_new_tokens,
        temperature=params.temperature,
        top_p=params.top_p,
        stop_sequences=stops,
        seed=params.seed,
    )
    completion = backend.complete(prompt.text, effective, seq)
    for lp in completion.token_logprobs:
        if lp > 1e-6:
            raise BackendError(f"backend returned positive token log-prob {lp}")
    truncated = _truncate_at_stop(completion.text, stops)
    start, end = _extract_query_span(truncated, marker)
    query_text = truncated[start:end]
    token_logprobs = _align_logprobs(completion, start, end) if query_text else ()
    token_logprobs = tuple(min(lp, 0.0) for lp in token_logprobs)
    return Generation(
        doc_id=prompt.doc_id,
        raw_text=completion.text,
        query_text=query_text,
        token_logprobs=token_logprobs,
        backend_tag=getattr(backend, "tag", "backend"),
        prompt_template_id=prompt.template_id,
        seq=seq,
    )


def read_generations(path: str | Path) -> list[Generation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                out.append(Generation.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad generation record: {exc}") from None
    return out


def write_generations(path: str | Path, generations: list[Generation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for gen in generations:
            fh.write(json.dumps(gen.to_record(), ensure_ascii=False) + "\n")


def materialize_generations(checkpoint_path: str | Path, out_path: str | Path) -> int:
    """Stable final artifact from a checkpoint: records sorted by
    (doc_id, seq), independent of completion order.
    """
    generations = read_generations(checkpoint_path)
    generations.sort(key=lambda g: (g.doc_id, g.seq))
    write_generations(out_path, generations)
    return len(generations)


@dataclass
class BatchStats:
    requested: int = 0
    completed: int = 0
    resumed: int = 0
    failed: int = 0
    failures: list[dict] = field(default_factory=list)


def generate_batch(
    prompts,
    params: GenerationParams,
    backend,
    concurrency: int = 1,
    checkpoint_path: str | Path = "generations.checkpoint.jsonl",
    max_attempts: int = 3,
    backoff_base: float = 0.2,
    marker: str = DEFAULT_ANSWER_MARKER,
    stats: BatchStats | None = None,
):
    """Run `generate` over a prompt stream with at most `concurrency` requests
    in flight. Yields newly completed generations in completion order; every
    generation is appended to the checkpoint and flushed to disk before it is
    emitted. Prompts whose sequence number already sits in the checkpoint are
    skipped, so interrupted runs resume cleanly.

    Per-prompt failures are retried with exponential backoff, then recorded in
    `<checkpoint>.failures.jsonl`; a failure never aborts the batch.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    checkpoint_path = Path(checkpoint_path)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    stats = stats if stats is not None else BatchStats()

    done_seqs: set[int] = set()
    if checkpoint_path.exists():
        for gen in _load_checkpoint_tolerant(checkpoint_path):
            done_seqs.add(gen.seq)
        stats.resumed = len(done_seqs)
        log.info("checkpoint %s: resuming past %d records", checkpoint_path, len(done_seqs))

    def run_one(prompt: Prompt, seq: int) -> Generation:
        last_exc: Exception | None = None
        for attempt in range(max_attempts):
            try:
                return generate(prompt, params, backend, seq=seq, marker=marker)
            except BackendError as exc:
                last_exc = exc
                if not exc.retryable or attempt == max_attempts - 1:
                    break
                time.sleep(backoff_base * (2**attempt))
        raise last_exc  # type: ignore[misc]

    pending_iter = (
        (seq, prompt) for seq, prompt in enumerate(prompts) if not _seen(seq, done_seqs, stats)
    )

    with open(checkpoint_path, "a", encoding="utf-8") as ckpt, ThreadPoolExecutor(
        max_workers=concurrency
    ) as pool:
        in_flight = {}
        exhausted = False

        def fill():
            nonlocal exhausted
            while len(in_flight) < concurrency and not exhausted:
                try:
                    seq, prompt = next(pending_iter)
                except StopIteration:
                    exhausted = True
                    return
                in_flight[pool.submit(run_one, prompt, seq)] = (seq, prompt)

        fill()
        while in_flight:
            finished, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            ready = []
            for fut in finished:
                seq, prompt = in_flight.pop(fut)
                try:
                    gen = fut.result()
                except Exception as exc:
                    stats.failed += 1
                    stats.failures.append(
                        {"seq": seq, "doc_id": prompt.doc_id, "error": str(exc)}
                    )
                    log.warning("seq %d (doc %s) failed permanently: %s", seq, prompt.doc_id, exc)
                    continue
                ckpt.write(json.dumps(gen.to_record(), ensure_ascii=False) + "\n")
                ready.append(gen)
            if ready:
                ckpt.flush()
                os.fsync(ckpt.fileno())
            fill()
            for gen in ready:
                stats.completed += 1
                yield gen

    if stats.failures:
        failures_path = checkpoint_path.with_suffix(checkpoint_path.suffix + ".failures.jsonl")
        with open(failures_path, "w", encoding="utf-8") as fh:
            for entry in stats.failures:
                fh.write(json.dumps(entry) + "\n")


def _seen(seq: int, done_seqs: set[int], stats: BatchStats) -> bool:
    stats.requested += 1
    return seq in done_seqs


def _load_checkpoint_tolerant(path: Path) -> list[Generation]:
    """Parse an append-only checkpoint, truncating one torn trailing line (a
    crash can land between write and fsync). Damage anywhere else raises.
    """
    generations: list[Generation] = []
    good_bytes = 0
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            generations.append(Generation.from_record(json.loads(line.decode("utf-8"))))
            good_bytes = len(b"\n".join(lines[: i + 1])) + 1
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
            trailing = all(not rest.strip() for rest in lines[i + 1 :])
            if not trailing:
                raise DataFormatError(f"{path}:{i + 1}: bad checkpoint record: {exc}") from None
            log.warning("%s: dropping torn final record (line %d)", path, i + 1)
            with open(path, "ab") as fh:
                fh.truncate(good_bytes)
            break
    return generations
