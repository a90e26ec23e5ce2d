"""Single TOML config file driving the CLI, plus the stage manifest that
makes pipeline runs resumable.

Unknown sections or keys are rejected so typos cannot silently fall back to
defaults. Relative paths resolve against the config file's directory. The
config hash covers the raw parsed document (canonical JSON, sorted keys), so
artifacts record exactly which configuration produced them.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict[str, dict[str, Any]] = {
    "dataset": {
        "corpus": "",
        "queries": "",
        "qrels": "",
    },
    "prompt": {
        "template": "inpars-vanilla",
        "examples": "static",  # static | sampled | none
        "examples_k": 3,
        "examples_seed": 13,
        "workers": 1,
    },
    "backend": {
        "mode": "mock",  # mock | http
        "generator_url": "",
        "generator_model": "default",
        "teacher_url": "",
        "teacher_model": "",
        "embedder": "fallback",  # fallback | http
        "embedder_url": "",
        "scorer": "local",  # local | http
        "scorer_url": "",
        "mock_words": 3,
        "mock_skip": 0,
        "mock_noise_fraction": 0.0,
        "teacher_mock_words": 4,
        "teacher_mock_skip": 0,
    },
    "generation": {
        "n": 0,  # 0 = one generation per document
        "max_new_tokens": 64,
        "temperature": 0.0,
        "top_p": 1.0,
        "seed": 0,
        "concurrency": 4,
    },
    "filter": {
        "strategy": "logprob-topk",
        "keep": 10000,
        "top_k_retrieval": 3,
        "L": 0.3,
        "H": 0.7,
        "seed": 0,
    },
    "scoring": {
        "k1": 0.9,
        "b": 0.4,
        "w_enc": 0.5,
        "w_bm25": 0.5,
        "embed_dim": 256,
        "embed_seed": 0,
    },
    "triplets": {
        "n_pairs": 20,
        "seed": 7,
        "L": 0.3,
        "H": 0.7,
        "template": "inpars-plus",
        "examples_k": 2,
    },
    "export": {
        "n_negatives": 1,
        "seed": 0,
    },
    "evaluate": {
        "k_retrieve": 1000,
        "rerank_top_k": 100,
        "ndcg_k": 10,
        "recall_k": 100,
        "run": "auto",  # auto | bm25 | rerank
    },
    "ablate": {
        "sizes": [100, 200],
        "keep": 50,
        "seed": 0,
    },
    "output": {
        "out_dir": "out",
    },
}

_PATH_KEYS = {("dataset", "corpus"), ("dataset", "queries"), ("dataset", "qrels")}


@dataclass
class PipelineConfig:
    raw: dict[str, dict[str, Any]]
    merged: dict[str, dict[str, Any]]
    base_dir: Path
    hash: str

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.merged[section]

    def path(self, section: str, key: str) -> Path | None:
        value = self.merged[section][key]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        p = Path(self.merged["output"]["out_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def section_fingerprint(self, *sections: str) -> str:
        payload = {s: self.merged[s] for s in sections}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()


def _merge_and_check(raw: dict) -> dict:
    merged: dict[str, dict[str, Any]] = {}
    for section, defaults in DEFAULTS.items():
        merged[section] = dict(defaults)
    for section, content in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"section [{section}] must be a table")
        for key, value in content.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key `{key}` in section [{section}]")
            default = DEFAULTS[section][key]
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"[{section}].{key} must be a boolean")
            if isinstance(default, (int, float)) and isinstance(value, bool):
                raise ConfigError(f"[{section}].{key} must be a number")
            merged[section][key] = value
    return merged


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Parse, merge over defaults, apply CLI overrides, and validate."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    merged = _merge_and_check(raw)
    for (section, key), value in (overrides or {}).items():
        merged[section][key] = value
    config_hash = hashlib.sha256(
        json.dumps(merged, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]
    cfg = PipelineConfig(raw=raw, merged=merged, base_dir=path.parent.resolve(), hash=config_hash)
    validate_config(cfg)
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    backend = cfg["backend"]
    if backend["mode"] not in ("mock", "http"):
        raise ConfigError(f"backend.mode must be mock or http, got {backend['mode']!r}")
    if backend["mode"] == "http" and not backend["generator_url"]:
        raise ConfigError("backend.mode=http requires backend.generator_url")
    if backend["mode"] == "mock" and backend["generator_url"]:
        raise ConfigError("backend.generator_url conflicts with backend.mode=mock")
    if backend["embedder"] not in ("fallback", "http"):
        raise ConfigError("backend.embedder must be fallback or http")
    if backend["embedder"] == "http" and not backend["embedder_url"]:
        raise ConfigError("backend.embedder=http requires backend.embedder_url")
    if backend["embedder"] == "fallback" and backend["embedder_url"]:
        raise ConfigError("backend.embedder_url conflicts with backend.embedder=fallback")
    if backend["scorer"] not in ("local", "http"):
        raise ConfigError("backend.scorer must be local or http")
    if backend["scorer"] == "http" and not backend["scorer_url"]:
        raise ConfigError("backend.scorer=http requires backend.scorer_url")
    if backend["scorer"] == "local" and backend["scorer_url"]:
        raise ConfigError("backend.scorer_url conflicts with backend.scorer=local")

    for section, key in _PATH_KEYS:
        value = cfg[section][key]
        if value:
            resolved = cfg.path(section, key)
            if not resolved.exists():
                raise ConfigError(f"[{section}].{key}: path does not exist: {resolved}")

    weights = cfg["scoring"]
    if abs(weights["w_enc"] + weights["w_bm25"] - 1.0) > 1e-9:
        raise ConfigError("scoring.w_enc and scoring.w_bm25 must sum to 1")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageManifest:
    """Records, per stage, the fingerprint of its inputs and the outputs it
    produced. A stage re-runs only when its fingerprint changed or its
    completion flag is unset.
    """

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / "manifest.json"
        self.stages: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.stages = json.load(fh).get("stages", {})

    def is_up_to_date(self, stage: str, fingerprint: str) -> bool:
        entry = self.stages.get(stage)
        return bool(entry and entry.get("completed") and entry.get("fingerprint") == fingerprint)

    def record(self, stage: str, fingerprint: str, outputs: list[str], seconds: float) -> None:
        self.stages[stage] = {
            "fingerprint": fingerprint,
            "outputs": outputs,
            "completed": True,
            "seconds": round(seconds, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump({"stages": self.stages}, fh, indent=2, sort_keys=True)
            fh.write("\n")
