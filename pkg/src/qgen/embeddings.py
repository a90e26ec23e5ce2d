"""Text embedding providers behind one interface.

Two providers exist: an HTTP client for the `/embed` wire contract, and a
deterministic hashing fallback for hermetic runs. Both produce L2-normalized
vectors. `CachingEmbedder` wraps either with content-hash memoization and
optional JSONL persistence, so repeated documents never hit the provider
twice.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path

import numpy as np
import requests

from .errors import BackendError, DataFormatError
from .textutil import tokenize

CACHE_FORMAT = "qgen-embcache"
CACHE_VERSION = 1


class HashingEmbedder:
    """Seeded feature-hashing bag-of-words projection, L2-normalized.

    Deterministic across processes: token positions and signs come from
    blake2b of the token plus the seed, never from Python's salted hash().
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def embed_many(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = tokenize(text)
            if not tokens:
                raise ValueError(f"cannot embed text with no tokens: {text!r}")
            vec = out[i]
            for token in tokens:
                digest = hashlib.blake2b(
                    token.encode("utf-8"), digest_size=8, salt=self.seed.to_bytes(8, "little")
                ).digest()
                value = int.from_bytes(digest, "little")
                sign = 1.0 if value & 1 else -1.0
                vec[(value >> 1) % self.dim] += sign
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                # hash collisions cancelled everything; nudge one slot
                vec[0] = 1.0
                norm = 1.0
            vec /= norm
        return out


class HttpEmbedder:
    """Client for the embedding wire contract:
    POST {base}/embed  {"texts": [..]}  ->  {"vectors": [[..], ..], "dim": n}
    """

    def __init__(self, base_url: str, timeout: float = 60.0, batch_size: int = 64):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.batch_size = batch_size
        self._session = requests.Session()
        self.dim: int | None = None

    def embed_many(self, texts: list[str]) -> np.ndarray:
        vectors: list[list[float]] = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start : start + self.batch_size]
            try:
                resp = self._session.post(
                    f"{self.base_url}/embed", json={"texts": batch}, timeout=self.timeout
                )
                resp.raise_for_status()
                payload = resp.json()
            except requests.RequestException as exc:
                raise BackendError(f"embedding provider request failed: {exc}", retryable=True)
            if "vectors" not in payload:
                raise BackendError("embedding response missing `vectors`")
            got = payload["vectors"]
            if len(got) != len(batch):
                raise BackendError(
                    f"embedding provider returned {len(got)} vectors for {len(batch)} texts"
                )
            dim = payload.get("dim") or (len(got[0]) if got else 0)
            if self.dim is None:
                self.dim = dim
            elif dim != self.dim:
                raise BackendError(f"embedding dimension changed: {self.dim} -> {dim}")
            vectors.extend(got)
        return np.asarray(vectors, dtype=np.float64)


class CachingEmbedder:
    """Content-hash cache in front of a provider. Reads are lock-free on the
    dict snapshot; inserts are serialized. When `path` is given, entries are
    appended as JSON lines behind a version header and reloaded on startup.
    """

    def __init__(self, provider, path: str | Path | None = None):
        self.provider = provider
        self.path = Path(path) if path else None
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.provider_calls = 0
        if self.path and self.path.exists():
            self._load()

    @staticmethod
    def _key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def embed_many(self, texts: list[str]) -> np.ndarray:
        keys = [self._key(t) for t in texts]
        missing: dict[str, str] = {}
        for key, text in zip(keys, texts):
            if key not in self._cache and key not in missing:
                missing[key] = text
        if missing:
            order = list(missing)
            fresh = self.provider.embed_many([missing[k] for k in order])
            self.provider_calls += len(order)
            with self._lock:
                for key, vec in zip(order, fresh):
                    self._cache[key] = np.asarray(vec, dtype=np.float64)
                if self.path:
                    self._append(order)
        return np.stack([self._cache[k] for k in keys])

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                return
            header = json.loads(header_line)
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise DataFormatError(
                    f"{self.path}: unsupported cache format {header!r}"
                )
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                self._cache[obj["hash"]] = np.asarray(obj["vector"], dtype=np.float64)

    def _append(self, keys: list[str]) -> None:
        new_file = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", encoding="utf-8") as fh:
            if new_file:
                fh.write(json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION}) + "\n")
            for key in keys:
                fh.write(
                    json.dumps({"hash": key, "vector": self._cache[key].tolist()}) + "\n"
                )


def embed(text: str, provider) -> np.ndarray:
    """Embed one text with any provider (cached or raw)."""
    if not text.strip():
        raise ValueError("cannot embed empty text")
    return np.asarray(provider.embed_many([text])[0], dtype=np.float64)
