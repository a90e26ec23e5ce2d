"""FastAPI application exposing the three wire contracts plus /health.

Endpoints mirror what the pipeline's HTTP clients expect:
  POST /v1/completions  OpenAI-compatible, token log-probs when logprobs >= 1
  POST /embed           {"texts": [..]} -> {"vectors": [[..], ..], "dim": n}
  POST /score           {"pairs": [{"query", "doc"}, ..]} -> {"scores": [..]}
  GET  /health          {"status": "ok", "roles": [..]}

Requests against an unconfigured role return 404; malformed bodies 422
(pydantic); model failures 500 with a JSON error body.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .config import SidecarConfig
from .models import build_embedder, build_generator, build_scorer

log = logging.getLogger(__name__)


class CompletionRequest(BaseModel):
    model: str = "default"
    prompt: str
    max_tokens: int = Field(default=64, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)
    top_p: float = Field(default=1.0, gt=0.0, le=1.0)
    stop: list[str] | None = None
    logprobs: int | None = None
    seed: int | None = None


class EmbedRequest(BaseModel):
    texts: list[str]


class ScorePair(BaseModel):
    query: str
    doc: str


class ScoreRequest(BaseModel):
    pairs: list[ScorePair]


def create_app(config: SidecarConfig | None = None) -> FastAPI:
    config = config or SidecarConfig()
    app = FastAPI(title="qgen-sidecar")

    generator = build_generator(config.generator, config.device) if config.generator else None
    embedder = (
        build_embedder(config.embedder, config.device, config.embed_dim)
        if config.embedder
        else None
    )
    scorer = build_scorer(config.scorer, config.device) if config.scorer else None

    def batched(items, call):
        out = []
        for start in range(0, len(items), config.max_batch_size):
            out.extend(call(items[start : start + config.max_batch_size]))
        return out

    @app.get("/health")
    def health():
        return {"status": "ok", "roles": config.roles}

    @app.post("/v1/completions")
    def completions(req: CompletionRequest):
        if generator is None:
            raise HTTPException(status_code=404, detail="generator role not configured")
        try:
            text, tokens, logprobs = generator.generate(
                req.prompt, req.max_tokens, req.temperature, req.top_p, req.stop or [], req.seed
            )
        except Exception as exc:  # noqa: BLE001 - surface as a 500 body
            log.exception("generation failed")
            raise HTTPException(status_code=500, detail=f"generation failed: {exc}")
        choice: dict = {"text": text, "index": 0, "finish_reason": "stop"}
        if req.logprobs:
            choice["logprobs"] = {"tokens": tokens, "token_logprobs": logprobs}
        return {"object": "text_completion", "model": req.model, "choices": [choice]}

    @app.post("/embed")
    def embed(req: EmbedRequest):
        if embedder is None:
            raise HTTPException(status_code=404, detail="embedder role not configured")
        if not req.texts:
            return {"vectors": [], "dim": getattr(embedder, "dim", 0)}
        try:
            vectors = batched(req.texts, lambda chunk: list(embedder.embed(chunk)))
        except Exception as exc:  # noqa: BLE001
            log.exception("embedding failed")
            raise HTTPException(status_code=500, detail=f"embedding failed: {exc}")
        return {"vectors": [[float(x) for x in vec] for vec in vectors], "dim": len(vectors[0])}

    @app.post("/score")
    def score(req: ScoreRequest):
        if scorer is None:
            raise HTTPException(status_code=404, detail="scorer role not configured")
        pairs = [(p.query, p.doc) for p in req.pairs]
        try:
            scores = batched(pairs, scorer.score)
        except Exception as exc:  # noqa: BLE001
            log.exception("scoring failed")
            raise HTTPException(status_code=500, detail=f"scoring failed: {exc}")
        return {"scores": [float(s) for s in scores]}

    return app
