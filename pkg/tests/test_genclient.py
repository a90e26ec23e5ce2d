import json

import pytest

from qgen.errors import BackendError
from qgen.genclient import (
    BatchStats,
    Completion,
    Generation,
    GenerationParams,
    MockBackend,
    generate,
    generate_batch,
    materialize_generations,
    read_generations,
    write_generations,
)
from qgen.prompts import Prompt

PARAMS = GenerationParams()


def prompt_for(doc_text: str, doc_id: str = "d1", stops=()) -> Prompt:
    return Prompt(
        doc_id=doc_id,
        text=f"Instructions.\n\nDocument: {doc_text}\nRelevant Query:\n",
        template_id="test",
        stop_sequences=tuple(stops),
    )


class TestMockBackend:
    def test_cat_sat(self):
        gen = generate(prompt_for("the cat sat on the mat"), PARAMS, MockBackend())
        assert gen.query_text == "what the cat sat"

    def test_stopword_skipped(self):
        doc = "Myelodysplastic syndromes are age-dependent stem cell malignancies"
        gen = generate(prompt_for(doc), PARAMS, MockBackend())
        assert gen.query_text == "what myelodysplastic syndromes age-dependent"

    def test_logprob_formula(self):
        completion = MockBackend().complete("Document: alpha beta\nQuery:", PARAMS, 0)
        assert list(completion.token_logprobs) == pytest.approx(
            [-1.0, -0.5, -1 / 3], abs=1e-12
        )

    def test_tokens_concatenate_to_text(self):
        completion = MockBackend().complete("Document: one two three four\nQuery:", PARAMS, 0)
        assert "".join(completion.tokens) == completion.text

    def test_noise_exact_count(self):
        backend = MockBackend(noise_fraction=0.2)
        n = 37
        corrupted = sum(1 for seq in range(n) if backend._corrupt(seq))
        assert corrupted == int(0.2 * n)

    def test_noise_copies_document(self):
        backend = MockBackend(noise_fraction=1.0)
        doc = "coral reef bleaching record"
        gen = generate(prompt_for(doc), PARAMS, backend, seq=0)
        assert gen.query_text == doc

    def test_teacher_variant_differs(self):
        doc = "coral reef bleaching studies of ocean warming"
        student = generate(prompt_for(doc), PARAMS, MockBackend(words=3)).query_text
        teacher = generate(prompt_for(doc), PARAMS, MockBackend(words=4)).query_text
        assert student != teacher
        assert teacher.startswith(student)


class ScriptedBackend:
    def __init__(self, text, tokens=None, logprobs=None):
        self.text = text
        self.tokens = tokens
        self.logprobs = logprobs if logprobs is not None else (
            tuple(-0.1 for _ in tokens) if tokens else (-0.1,)
        )
        self.tag = "scripted"

    def complete(self, prompt_text, params, seq=0):
        return Completion(
            text=self.text,
            tokens=tuple(self.tokens) if self.tokens else None,
            token_logprobs=tuple(self.logprobs),
        )


class TestExtraction:
    def test_marker_extraction_with_stop(self):
        raw = "step 1 consider the topic\nQuery: effects of TLR signaling\n\nstep"
        backend = ScriptedBackend(raw, tokens=[raw], logprobs=[-0.5])
        prompt = prompt_for("anything", stops=("\n\n",))
        gen = generate(prompt, PARAMS, backend)
        assert gen.query_text == "effects of TLR signaling"

    def test_first_line_rule(self):
        backend = ScriptedBackend("just a query\nand trailing junk", tokens=None)
        prompt = prompt_for("anything")
        with pytest.raises(BackendError):
            # span != whole output and no token strings -> alignment refuses
            generate(prompt, PARAMS, backend)

    def test_first_line_rule_with_tokens(self):
        text = "just a query\nand junk"
        tokens = ["just ", "a ", "query", "\n", "and ", "junk"]
        backend = ScriptedBackend(text, tokens=tokens, logprobs=[-0.1] * 6)
        gen = generate(prompt_for("x"), PARAMS, backend)
        assert gen.query_text == "just a query"
        assert len(gen.token_logprobs) == 3

    def test_missing_logprobs_rejected(self):
        class NoLogprobBackend:
            tag = "broken"

            def complete(self, prompt_text, params, seq=0):
                raise BackendError(
                    "backend returned no token log-probs; enable logprob capture"
                )

        with pytest.raises(BackendError, match="logprob"):
            generate(prompt_for("x"), PARAMS, NoLogprobBackend())

    def test_empty_extraction_flagged_degenerate(self):
        backend = ScriptedBackend("\n\n", tokens=["\n\n"], logprobs=[-0.1])
        gen = generate(prompt_for("x"), PARAMS, backend)
        assert gen.degenerate
        assert gen.token_logprobs == ()

    def test_positive_logprob_rejected(self):
        backend = ScriptedBackend("ok", tokens=["ok"], logprobs=[0.5])
        with pytest.raises(BackendError, match="positive"):
            generate(prompt_for("x"), PARAMS, backend)


def make_prompts(n, with_ids=True):
    return [
        prompt_for(f"unique{i:03d} words for document {i:03d}", doc_id=f"d{i:03d}")
        for i in range(n)
    ]


class TestGenerateBatch:
    def drain(self, prompts, tmp_path, concurrency=4, **kwargs):
        stats = BatchStats()
        out = list(
            generate_batch(
                prompts,
                PARAMS,
                MockBackend(),
                concurrency=concurrency,
                checkpoint_path=tmp_path / "ckpt.jsonl",
                stats=stats,
                **kwargs,
            )
        )
        return out, stats

    def test_concurrency_invariance(self, tmp_path):
        prompts = make_prompts(30)
        one, _ = self.drain(prompts, tmp_path / "a", concurrency=1)
        (tmp_path / "a").mkdir(exist_ok=True)
        sixteen, _ = self.drain(prompts, tmp_path / "b", concurrency=16)
        key = lambda g: (g.doc_id, g.seq)
        assert sorted(one, key=key) == sorted(sixteen, key=key)

    def test_repetition_allows_more_than_corpus(self, tmp_path):
        from qgen.prompts import cycle_prompts

        prompts = list(cycle_prompts(make_prompts(7), 100))
        out, _ = self.drain(prompts, tmp_path)
        assert len(out) == 100

    def test_resume_skips_checkpointed(self, tmp_path):
        prompts = make_prompts(100)
        ckpt = tmp_path / "ckpt.jsonl"

        # interrupted run: stop after 40 completions
        stream = generate_batch(
            prompts, PARAMS, MockBackend(), concurrency=3, checkpoint_path=ckpt
        )
        seen = 0
        for _ in stream:
            seen += 1
            if seen == 40:
                stream.close()
                break
        assert 40 <= len(read_generations(ckpt)) < 100

        # resumed run completes the rest; final file identical to a fresh run
        stats = BatchStats()
        list(
            generate_batch(
                prompts,
                PARAMS,
                MockBackend(),
                concurrency=3,
                checkpoint_path=ckpt,
                stats=stats,
            )
        )
        assert stats.resumed >= 40
        final = tmp_path / "final.jsonl"
        materialize_generations(ckpt, final)

        fresh_ckpt = tmp_path / "fresh.jsonl"
        list(
            generate_batch(
                prompts, PARAMS, MockBackend(), concurrency=3, checkpoint_path=fresh_ckpt
            )
        )
        fresh_final = tmp_path / "fresh_final.jsonl"
        materialize_generations(fresh_ckpt, fresh_final)
        assert final.read_bytes() == fresh_final.read_bytes()
        assert len(read_generations(final)) == 100

    def test_failures_recorded_not_fatal(self, tmp_path):
        class FlakyBackend(MockBackend):
            def complete(self, prompt_text, params, seq=0):
                if "unique003" in prompt_text:
                    raise BackendError("permanently down", retryable=False)
                return super().complete(prompt_text, params, seq)

        stats = BatchStats()
        out = list(
            generate_batch(
                make_prompts(10),
                PARAMS,
                FlakyBackend(),
                concurrency=2,
                checkpoint_path=tmp_path / "c.jsonl",
                stats=stats,
            )
        )
        assert len(out) == 9
        assert stats.failed == 1
        failures_file = tmp_path / "c.jsonl.failures.jsonl"
        assert failures_file.exists()
        assert json.loads(failures_file.read_text())["doc_id"] == "d003"

    def test_retry_then_success(self, tmp_path):
        attempts = {}

        class EventuallyUpBackend(MockBackend):
            def complete(self, prompt_text, params, seq=0):
                attempts[seq] = attempts.get(seq, 0) + 1
                if attempts[seq] < 3:
                    raise BackendError("transient", retryable=True)
                return super().complete(prompt_text, params, seq)

        stats = BatchStats()
        out = list(
            generate_batch(
                make_prompts(2),
                PARAMS,
                EventuallyUpBackend(),
                concurrency=1,
                checkpoint_path=tmp_path / "c.jsonl",
                backoff_base=0.001,
                stats=stats,
            )
        )
        assert len(out) == 2 and stats.failed == 0


def test_generation_file_round_trip(tmp_path):
    gens = [
        Generation(
            doc_id=f"d{i}",
            raw_text=f"raw {i}",
            query_text=f"query {i}",
            token_logprobs=(-0.5, -0.25),
            backend_tag="mock",
            prompt_template_id="t",
            seq=i,
        )
        for i in range(5)
    ]
    path = tmp_path / "gens.jsonl"
    write_generations(path, gens)
    assert read_generations(path) == gens
    record = json.loads(path.read_text().splitlines()[0])
    assert set(record) == {"doc_id", "query", "raw_text", "log_probs", "template", "backend", "seq"}
