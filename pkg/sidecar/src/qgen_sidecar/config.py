"""Sidecar configuration: which model backs each role.

Role specs: `words` (deterministic leading-content-words generator), `hash`
(feature-hashing embedder), `lexical` (token-overlap scorer), or `hf:<id>`
for a HuggingFace checkpoint (causal LM / sentence-transformer /
cross-encoder respectively; requires the `hf` extra and locally available
weights). An empty spec disables the role; at least one must stay enabled.
"""

from __future__ import annotations

import json
import os
import socket
from dataclasses import dataclass
from pathlib import Path

DEFAULTS = {
    "generator": "words",
    "embedder": "hash",
    "scorer": "lexical",
    "device": "cpu",
    "max_batch_size": 32,
    "embed_dim": 256,
    "port": 8750,
}


@dataclass
class SidecarConfig:
    generator: str = DEFAULTS["generator"]
    embedder: str = DEFAULTS["embedder"]
    scorer: str = DEFAULTS["scorer"]
    device: str = DEFAULTS["device"]
    max_batch_size: int = DEFAULTS["max_batch_size"]
    embed_dim: int = DEFAULTS["embed_dim"]
    port: int = DEFAULTS["port"]

    def __post_init__(self):
        if not (self.generator or self.embedder or self.scorer):
            raise ValueError("configure at least one role (generator/embedder/scorer)")
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")

    @property
    def roles(self) -> list[str]:
        return [
            name
            for name, spec in (
                ("generator", self.generator),
                ("embedder", self.embedder),
                ("scorer", self.scorer),
            )
            if spec
        ]


def load_config(path: str | Path | None = None) -> SidecarConfig:
    """File values (JSON) are overridden by SIDECAR_* environment variables."""
    values = dict(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    env_map = {
        "SIDECAR_GENERATOR": "generator",
        "SIDECAR_EMBEDDER": "embedder",
        "SIDECAR_SCORER": "scorer",
        "SIDECAR_DEVICE": "device",
        "SIDECAR_MAX_BATCH_SIZE": "max_batch_size",
        "SIDECAR_EMBED_DIM": "embed_dim",
        "SIDECAR_PORT": "port",
    }
    for env, key in env_map.items():
        raw = os.environ.get(env)
        if raw is not None:
            values[key] = int(raw) if key in ("max_batch_size", "embed_dim", "port") else raw
    return SidecarConfig(**values)


def ensure_port_free(port: int, host: str = "127.0.0.1") -> None:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError as exc:
            raise RuntimeError(f"port {port} is not free: {exc}") from None
