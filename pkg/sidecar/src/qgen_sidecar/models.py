"""Role implementations behind the wire contracts.

Builtin roles are deterministic and dependency-light so the sidecar can be
exercised end to end without GPU weights: a leading-content-words generator,
a feature-hashing embedder with L2 normalization, and a token-overlap
scorer. `hf:<model-id>` specs swap in HuggingFace checkpoints (causal LM,
sentence-transformer, cross-encoder) when the `hf` extra is installed and
weights are available locally.
"""

from __future__ import annotations

import hashlib
import re
import threading

import numpy as np

_TOKEN = re.compile(r"[a-z0-9]+")

_STOPWORDS = frozenset(
    """
    am an and are as at be been but by for from had has have in is it its of
    on or that this to was were which will with
    """.split()
)


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class WordsGenerator:
    """Echo-style deterministic completion: `what ` plus the first three
    content words of the document block in the prompt (last `Document:`
    label, falling back to the last non-empty line). Token log-probs are a
    fixed decaying schedule; `tokens` concatenate exactly to `text` so
    clients can align spans.
    """

    name = "words"

    def generate(
        self,
        prompt: str,
        max_tokens: int,
        temperature: float,
        top_p: float,
        stop: list[str],
        seed: int | None,
    ) -> tuple[str, list[str], list[float]]:
        source = self._document_block(prompt)
        words = [t for t in _tokens(source) if t not in _STOPWORDS][:3]
        text = "what " + " ".join(words) if words else ""
        for stop_seq in stop or []:
            idx = text.find(stop_seq)
            if idx != -1:
                text = text[:idx]
        tokens = re.findall(r"\S+\s*", text)[:max_tokens]
        text = "".join(tokens)
        logprobs = [-1.0 / (i + 1) for i in range(len(tokens))]
        return text, tokens, logprobs

    @staticmethod
    def _document_block(prompt: str) -> str:
        marker = "Document: "
        idx = prompt.rfind(marker)
        if idx != -1:
            seg = prompt[idx + len(marker) :].rstrip("\n")
            if "\n" in seg:
                seg = seg[: seg.rfind("\n")]
            return seg
        lines = [line for line in prompt.splitlines() if line.strip()]
        return lines[-1] if lines else prompt


class HashEmbedder:
    """Feature-hashing bag of words, L2-normalized, blake2b positions/signs."""

    name = "hash"

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            for token in _tokens(text) or ["<empty>"]:
                digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
                value = int.from_bytes(digest, "little")
                out[i, (value >> 1) % self.dim] += 1.0 if value & 1 else -1.0
            norm = np.linalg.norm(out[i])
            if norm == 0.0:
                out[i, 0] = 1.0
                norm = 1.0
            out[i] /= norm
        return out


class LexicalScorer:
    """Relevance as normalized token overlap |q & d| / sqrt(|q| * |d|)."""

    name = "lexical"

    def score(self, pairs: list[tuple[str, str]]) -> list[float]:
        scores = []
        for query, doc in pairs:
            q, d = set(_tokens(query)), set(_tokens(doc))
            if not q or not d:
                scores.append(0.0)
                continue
            scores.append(len(q & d) / (len(q) * len(d)) ** 0.5)
        return scores


class HfGenerator:  # pragma: no cover - needs local model weights
    name = "hf-generator"

    def __init__(self, model_id: str, device: str = "cpu"):
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModelForCausalLM.from_pretrained(model_id).to(device).eval()
        self.device = device
        self._lock = threading.Lock()

    def generate(self, prompt, max_tokens, temperature, top_p, stop, seed):
        torch = self._torch
        with self._lock, torch.no_grad():
            if seed is not None:
                torch.manual_seed(seed)
            inputs = self.tokenizer(prompt, return_tensors="pt").to(self.device)
            result = self.model.generate(
                **inputs,
                max_new_tokens=max_tokens,
                do_sample=temperature > 0,
                temperature=max(temperature, 1e-5),
                top_p=top_p,
                return_dict_in_generate=True,
                output_scores=True,
                pad_token_id=self.tokenizer.eos_token_id,
            )
            new_ids = result.sequences[0][inputs["input_ids"].shape[1] :]
            tokens, logprobs = [], []
            for step, token_id in enumerate(new_ids):
                step_logprobs = torch.log_softmax(result.scores[step][0], dim=-1)
                tokens.append(self.tokenizer.decode(token_id))
                logprobs.append(float(step_logprobs[token_id]))
        text = "".join(tokens)
        for stop_seq in stop or []:
            idx = text.find(stop_seq)
            if idx != -1:
                cut = idx
                text = text[:cut]
                kept, pos = [], 0
                for tok, lp in zip(tokens, logprobs):
                    if pos >= cut:
                        break
                    kept.append((tok, lp))
                    pos += len(tok)
                tokens = [t for t, _ in kept]
                logprobs = [lp for _, lp in kept]
        return text, tokens, logprobs


class HfEmbedder:  # pragma: no cover - needs local model weights
    name = "hf-embedder"

    def __init__(self, model_id: str, device: str = "cpu"):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_id, device=device)
        self.dim = self.model.get_sentence_embedding_dimension()
        self._lock = threading.Lock()

    def embed(self, texts):
        # mean pooling over the final layer with L2 normalization
        with self._lock:
            return np.asarray(
                self.model.encode(texts, normalize_embeddings=True, convert_to_numpy=True),
                dtype=np.float64,
            )


class HfScorer:  # pragma: no cover - needs local model weights
    name = "hf-scorer"

    def __init__(self, model_id: str, device: str = "cpu"):
        from sentence_transformers import CrossEncoder

        self.model = CrossEncoder(model_id, device=device)
        self._lock = threading.Lock()

    def score(self, pairs):
        # raw relevance logits; callers only compare, so any monotone
        # convention is fine
        with self._lock:
            return [float(s) for s in self.model.predict(list(pairs))]


def build_generator(spec: str, device: str):
    if spec == "words":
        return WordsGenerator()
    if spec.startswith("hf:"):
        return HfGenerator(spec[3:], device)
    raise ValueError(f"unknown generator spec {spec!r}")


def build_embedder(spec: str, device: str, dim: int):
    if spec == "hash":
        return HashEmbedder(dim=dim)
    if spec.startswith("hf:"):
        return HfEmbedder(spec[3:], device)
    raise ValueError(f"unknown embedder spec {spec!r}")


def build_scorer(spec: str, device: str):
    if spec == "lexical":
        return LexicalScorer()
    if spec.startswith("hf:"):
        return HfScorer(spec[3:], device)
    raise ValueError(f"unknown scorer spec {spec!r}")
