"""Contract conformance against live endpoints, driven by the pipeline
package's own HTTP clients: the same shape, determinism, and invariant
assertions the pipeline's mock suite makes must hold here (values differ,
shapes and invariants do not).
"""

import numpy as np
import requests
from fastapi.testclient import TestClient

from qgen.embeddings import HttpEmbedder
from qgen.genclient import GenerationParams, HttpBackend, generate, generate_batch
from qgen.prompts import Prompt
from qgen.scoring import HttpPointwiseScorer

from qgen_sidecar.app import create_app
from qgen_sidecar.config import SidecarConfig


def prompt_for(doc_text, doc_id="d1", stops=()):
    return Prompt(
        doc_id=doc_id,
        text=f"Instructions.\n\nDocument: {doc_text}\nRelevant Query:\n",
        template_id="t",
        stop_sequences=tuple(stops),
    )


def test_health_reports_roles(live_sidecar):
    payload = requests.get(f"{live_sidecar}/health", timeout=5).json()
    assert payload["status"] == "ok"
    assert payload["roles"] == ["generator", "embedder", "scorer"]


class TestEmbedContract:
    def test_identical_texts_identical_vectors(self, live_sidecar):
        embedder = HttpEmbedder(live_sidecar)
        vecs = embedder.embed_many(["same text", "same text", "other text"])
        assert np.array_equal(vecs[0], vecs[1])
        assert not np.array_equal(vecs[0], vecs[2])

    def test_constant_dimension_and_arity(self, live_sidecar):
        embedder = HttpEmbedder(live_sidecar)
        first = embedder.embed_many(["a b c"])
        second = embedder.embed_many(["d e", "f g h i", "j"])
        assert first.shape == (1, 256)
        assert second.shape == (3, 256)
        assert embedder.dim == 256

    def test_unit_norm(self, live_sidecar):
        vecs = HttpEmbedder(live_sidecar).embed_many(["normalized vector please"])
        assert abs(np.linalg.norm(vecs[0]) - 1.0) < 1e-9

    def test_determinism_across_calls(self, live_sidecar):
        embedder = HttpEmbedder(live_sidecar)
        a = embedder.embed_many(["stable"])
        b = embedder.embed_many(["stable"])
        assert np.array_equal(a, b)


class TestScoreContract:
    def test_one_score_per_pair_order_preserving(self, live_sidecar):
        scorer = HttpPointwiseScorer(live_sidecar)
        pairs = [
            ("coral bleaching", "coral bleaching events in the reef"),
            ("quantum error", "ancient pottery analysis"),
            ("pottery", "ancient pottery analysis"),
        ]
        scores = scorer.score_pairs(pairs)
        assert len(scores) == 3
        reversed_scores = scorer.score_pairs(pairs[::-1])
        assert reversed_scores == scores[::-1]

    def test_overlap_ranks_higher(self, live_sidecar):
        scorer = HttpPointwiseScorer(live_sidecar)
        match, miss = scorer.score_pairs(
            [
                ("glacier melt", "glacier melt acceleration records"),
                ("glacier melt", "gut microbiome diversity"),
            ]
        )
        assert match > miss

    def test_large_batch_chunks_internally(self, live_sidecar):
        scorer = HttpPointwiseScorer(live_sidecar, batch_size=7)
        pairs = [(f"query {i}", f"document {i} text") for i in range(40)]
        assert len(scorer.score_pairs(pairs)) == 40


class TestCompletionContract:
    def test_generation_invariants(self, live_sidecar):
        backend = HttpBackend(live_sidecar, model="words")
        gen = generate(prompt_for("coral reef bleaching studies of warming"), GenerationParams(), backend)
        assert gen.query_text
        assert gen.token_logprobs, "token log-probs must be present"
        assert all(lp <= 0 for lp in gen.token_logprobs)
        assert len(gen.token_logprobs) == len(gen.query_text.split())

    def test_determinism(self, live_sidecar):
        backend = HttpBackend(live_sidecar, model="words")
        prompt = prompt_for("solar panel efficiency measurements")
        a = generate(prompt, GenerationParams(), backend)
        b = generate(prompt, GenerationParams(), backend)
        assert a == b

    def test_stop_sequence_respected(self, live_sidecar):
        backend = HttpBackend(live_sidecar, model="words")
        gen = generate(
            prompt_for("alpha beta gamma delta", stops=("beta",)),
            GenerationParams(),
            backend,
        )
        assert "beta" not in gen.raw_text

    def test_raw_response_shape(self, live_sidecar):
        resp = requests.post(
            f"{live_sidecar}/v1/completions",
            json={"model": "words", "prompt": "Document: x y z\nQuery:", "logprobs": 1},
            timeout=5,
        )
        choice = resp.json()["choices"][0]
        assert "text" in choice
        logprobs = choice["logprobs"]
        assert len(logprobs["tokens"]) == len(logprobs["token_logprobs"])

    def test_batch_with_checkpoint_resume(self, live_sidecar, tmp_path):
        backend = HttpBackend(live_sidecar, model="words")
        prompts = [prompt_for(f"topic{i} word{i} extra{i} tail", doc_id=f"d{i:02d}") for i in range(12)]
        ckpt = tmp_path / "ckpt.jsonl"
        stream = generate_batch(
            prompts, GenerationParams(), backend, concurrency=4, checkpoint_path=ckpt
        )
        first_five = []
        for gen in stream:
            first_five.append(gen)
            if len(first_five) == 5:
                stream.close()
                break
        rest = list(
            generate_batch(
                prompts, GenerationParams(), backend, concurrency=4, checkpoint_path=ckpt
            )
        )
        seqs = sorted(g.seq for g in first_five) + sorted(g.seq for g in rest)
        assert sorted(seqs) == list(range(12))


class TestUnconfiguredRoles:
    def test_missing_roles_404(self):
        app = create_app(SidecarConfig(generator="", scorer=""))
        client = TestClient(app)
        assert client.get("/health").json()["roles"] == ["embedder"]
        assert client.post("/v1/completions", json={"prompt": "x"}).status_code == 404
        assert client.post("/score", json={"pairs": []}).status_code == 404
        assert client.post("/embed", json={"texts": ["ok"]}).status_code == 200

    def test_malformed_body_422(self):
        client = TestClient(create_app(SidecarConfig()))
        assert client.post("/embed", json={"wrong": 1}).status_code == 422
