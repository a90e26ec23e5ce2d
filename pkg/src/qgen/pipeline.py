"""Pipeline stages behind the CLI subcommands.

Stages form a linear graph (generate -> filter -> triplets/export and
retrieve -> rerank -> evaluate, plus the ablation driver). Each stage
fingerprints its inputs (relevant config sections plus input file hashes),
skips itself when the manifest says it already ran on identical inputs, and
writes a deterministic `<stage>.meta.json` next to its artifacts embedding
the config hash. Timing lives only in the manifest so artifacts stay
byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from . import plots
from .bm25 import build_bm25_index
from .config import PipelineConfig, StageManifest, file_sha256
from .corpus import (
    Corpus,
    QrelSet,
    QuerySet,
    RelevantPair,
    load_corpus,
    load_qrels,
    load_queries,
    sample_relevant_pairs,
)
from .cpo import TripletStats, build_triplet_candidates, triplets_from_candidates, write_triplets
from .embeddings import CachingEmbedder, HashingEmbedder, HttpEmbedder
from .errors import ConfigError, QgenError
from .evaluation import (
    AblationBundle,
    ablate_filter,
    export_training_file,
    first_stage_retrieve,
    ndcg_at_k,
    recall_at_k,
    rerank,
    write_ablation_csv,
)
from .filters import filter_consistency, filter_logprob_topk, filter_reranker_topk
from .genclient import (
    BatchStats,
    Generation,
    GenerationParams,
    HttpBackend,
    MockBackend,
    generate_batch,
    materialize_generations,
    read_generations,
    write_generations,
)
from .prompts import (
    build_prompts_parallel,
    cycle_prompts,
    load_static_examples,
    resolve_template,
    sampled_example_policy,
    static_example_policy,
)
from .scoring import (
    HttpPointwiseScorer,
    LocalCombinedScorer,
    ScoredQuery,
    score_generations,
)
from .trecrun import read_run, write_run

log = logging.getLogger(__name__)


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: list[str]
    summary: str


class _Context:
    """Lazily loaded shared resources for one command invocation."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._corpus: Corpus | None = None
        self._queries: QuerySet | None = None
        self._qrels: QrelSet | None = None
        self._index = None
        self._embedder = None

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            path = self.cfg.path("dataset", "corpus")
            if path is None:
                raise ConfigError("dataset.corpus is required for this command")
            self._corpus = load_corpus(path)
        return self._corpus

    @property
    def queries(self) -> QuerySet:
        if self._queries is None:
            path = self.cfg.path("dataset", "queries")
            if path is None:
                raise ConfigError("dataset.queries is required for this command")
            self._queries = load_queries(path)
        return self._queries

    @property
    def qrels(self) -> QrelSet:
        if self._qrels is None:
            path = self.cfg.path("dataset", "qrels")
            if path is None:
                raise ConfigError("dataset.qrels is required for this command")
            self._qrels = load_qrels(path, queries=self.queries, corpus=self.corpus)
        return self._qrels

    @property
    def index(self):
        if self._index is None:
            scoring = self.cfg["scoring"]
            self._index = build_bm25_index(self.corpus, k1=scoring["k1"], b=scoring["b"])
        return self._index

    @property
    def embedder(self):
        if self._embedder is None:
            backend = self.cfg["backend"]
            scoring = self.cfg["scoring"]
            if backend["embedder"] == "http":
                provider = HttpEmbedder(backend["embedder_url"])
            else:
                provider = HashingEmbedder(dim=scoring["embed_dim"], seed=scoring["embed_seed"])
            cache_path = self.cfg.out_dir / "embeddings.cache.jsonl"
            self._embedder = CachingEmbedder(provider, path=cache_path)
        return self._embedder

    def generator_backend(self, role: str = "student"):
        backend = self.cfg["backend"]
        if backend["mode"] == "mock":
            if role == "teacher":
                return MockBackend(
                    words=backend["teacher_mock_words"],
                    skip=backend["teacher_mock_skip"],
                    tag="mock-teacher",
                )
            return MockBackend(
                words=backend["mock_words"],
                skip=backend["mock_skip"],
                noise_fraction=backend["mock_noise_fraction"],
                tag="mock",
            )
        if role == "teacher":
            url = backend["teacher_url"] or backend["generator_url"]
            model = backend["teacher_model"] or backend["generator_model"]
            return HttpBackend(url, model=model, tag=f"http:{model}")
        return HttpBackend(backend["generator_url"], model=backend["generator_model"])

    def pointwise_scorer(self):
        backend = self.cfg["backend"]
        if backend["scorer"] == "http":
            return HttpPointwiseScorer(backend["scorer_url"])
        scoring = self.cfg["scoring"]
        return LocalCombinedScorer(
            self.corpus,
            self.index,
            self.embedder,
            w_enc=scoring["w_enc"],
            w_bm25=scoring["w_bm25"],
        )

    def generation_params(self) -> GenerationParams:
        gen = self.cfg["generation"]
        return GenerationParams(
            max_new_tokens=gen["max_new_tokens"],
            temperature=gen["temperature"],
            top_p=gen["top_p"],
            seed=gen["seed"],
        )

    def example_policy(self, template, kind: str, k: int, seed: int):
        if kind == "none" or template.max_examples == 0:
            return static_example_policy([])
        if kind == "static":
            examples = load_static_examples()[: min(k, template.max_examples)]
            return static_example_policy(examples)
        if kind == "sampled":
            pairs = self.all_relevant_pairs()
            return sampled_example_policy(pairs, min(k, template.max_examples), seed)
        raise ConfigError(f"unknown prompt.examples mode {kind!r}")

    def all_relevant_pairs(self) -> list[RelevantPair]:
        pairs = []
        for (qid, doc_id), grade in sorted(self.qrels.items()):
            if grade >= 1 and doc_id in self.corpus and qid in self.queries:
                pairs.append(RelevantPair(doc=self.corpus[doc_id], query=self.queries[qid]))
        return pairs


def _stage_paths(cfg: PipelineConfig) -> dict[str, Path]:
    out = cfg.out_dir
    return {
        "checkpoint": out / "generations.checkpoint.jsonl",
        "generations": out / "generations.jsonl",
        "filtered": out / "filtered.jsonl",
        "filter_report": out / "filter_report.json",
        "filter_hist": out / "filter_scores.png",
        "candidates": out / "triplet_candidates.jsonl",
        "triplets": out / "triplets.jsonl",
        "triplets_report": out / "triplets_report.json",
        "triplets_hist": out / "triplet_scores.png",
        "train": out / "train.jsonl",
        "run_bm25": out / "run_bm25.trec",
        "run_rerank": out / "run_rerank.trec",
        "metrics": out / "metrics.json",
        "metrics_hist": out / "ndcg_per_query.png",
        "ablation": out / "ablation.csv",
        "ablation_fig": out / "ablation.png",
    }


def _write_meta(cfg: PipelineConfig, stage: str, fingerprint: str, inputs: dict, outputs: list[Path], extra: dict) -> None:
    meta = {
        "stage": stage,
        "config_hash": cfg.hash,
        "fingerprint": fingerprint,
        "inputs": inputs,
        "outputs": [p.name for p in outputs],
    }
    meta.update(extra)
    with open(cfg.out_dir / f"{stage}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fingerprint(cfg: PipelineConfig, sections: tuple[str, ...], files: list[Path]) -> tuple[str, dict]:
    inputs = {}
    for path in files:
        if path and path.exists():
            inputs[path.name] = file_sha256(path)
    digest = cfg.section_fingerprint(*sections) + ":" + ":".join(
        f"{name}={h}" for name, h in sorted(inputs.items())
    )
    return hashlib.sha256(digest.encode("utf-8")).hexdigest()[:16], inputs


def _run_stage(cfg, stage, sections, input_files, runner) -> StageResult:
    """Shared gating: fingerprint, manifest check, run, record."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = StageManifest(cfg.out_dir)
    fingerprint, inputs = _fingerprint(cfg, sections, input_files)
    if manifest.is_up_to_date(stage, fingerprint):
        entry = manifest.stages[stage]
        return StageResult(stage, True, entry.get("outputs", []), f"{stage}: up to date")
    started = time.monotonic()
    outputs, extra, summary = runner(fingerprint)
    _write_meta(cfg, stage, fingerprint, inputs, outputs, extra)
    manifest.record(
        stage, fingerprint, [p.name for p in outputs], time.monotonic() - started
    )
    return StageResult(stage, False, [p.name for p in outputs], summary)


def _reset_stale_checkpoint(checkpoint: Path, fingerprint: str) -> None:
    """A checkpoint may only seed a resume of the identical stage
    configuration; re-running with changed inputs starts clean."""
    stamp = checkpoint.with_suffix(checkpoint.suffix + ".fingerprint")
    if checkpoint.exists():
        if stamp.exists() and stamp.read_text().strip() == fingerprint:
            return
        checkpoint.unlink()
        failures = checkpoint.with_suffix(checkpoint.suffix + ".failures.jsonl")
        if failures.exists():
            failures.unlink()
    stamp.parent.mkdir(parents=True, exist_ok=True)
    stamp.write_text(fingerprint + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise QgenError(
            f"missing {path.name}: run `qgen {producer}` first (looked in {path.parent})"
        )
    return path


def cmd_generate(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        _reset_stale_checkpoint(paths["checkpoint"], fingerprint)
        prompt_cfg = cfg["prompt"]
        template = resolve_template(prompt_cfg["template"])
        policy = ctx.example_policy(
            template,
            prompt_cfg["examples"],
            prompt_cfg["examples_k"],
            prompt_cfg["examples_seed"],
        )
        base_prompts = []
        for prompt in build_prompts_parallel(
            template, policy, ctx.corpus, workers=prompt_cfg["workers"]
        ):
            base_prompts.append(prompt)
        n = cfg["generation"]["n"] or len(base_prompts)
        stats = BatchStats()
        stream = generate_batch(
            cycle_prompts(base_prompts, n),
            ctx.generation_params(),
            ctx.generator_backend(),
            concurrency=cfg["generation"]["concurrency"],
            checkpoint_path=paths["checkpoint"],
            stats=stats,
        )
        for _ in stream:
            pass
        count = materialize_generations(paths["checkpoint"], paths["generations"])
        summary = (
            f"generate: {count} generations ({stats.resumed} resumed, "
            f"{stats.failed} failed) -> {paths['generations'].name}"
        )
        extra = {
            "counts": {
                "requested": n,
                "materialized": count,
                "resumed": stats.resumed,
                "failed": stats.failed,
            }
        }
        return [paths["generations"]], extra, summary

    return _run_stage(
        cfg,
        "generate",
        ("dataset", "prompt", "backend", "generation"),
        [cfg.path("dataset", "corpus")],
        runner,
    )


def _mean_logprob_scored(generations: list[Generation]) -> list[ScoredQuery]:
    return score_generations(generations, corpus={}, index=None, embedder=None, with_combined=False)


def cmd_filter(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)
    strategy = cfg["filter"]["strategy"]
    input_file = paths["candidates"] if strategy == "margin" else paths["generations"]

    def runner(fingerprint):
        fcfg = cfg["filter"]
        report: dict = {"strategy": strategy}
        if strategy == "margin":
            _require(paths["candidates"], "triplets")
            kept_rows, dropped = _filter_margin_file(paths["candidates"], fcfg["L"], fcfg["H"])
            out_path = cfg.out_dir / "filtered_candidates.jsonl"
            with open(out_path, "w", encoding="utf-8") as fh:
                for row in kept_rows:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            report.update(
                {"input": len(kept_rows) + dropped, "kept": len(kept_rows), "dropped": dropped}
            )
            scores = [
                s for row in kept_rows for s in (row["s_reference"], row["s_teacher"], row["s_student"])
            ]
            plots.save_score_histogram(
                scores,
                paths["filter_hist"],
                title="margin-filtered candidate scores",
                xlabel="combined score",
                bounds=(fcfg["L"], fcfg["H"]),
            )
            outputs = [out_path, paths["filter_report"], paths["filter_hist"]]
        else:
            _require(paths["generations"], "generate")
            generations = read_generations(paths["generations"])
            usable = [g for g in generations if not g.degenerate]
            report["degenerate_excluded"] = len(generations) - len(usable)
            scored = _mean_logprob_scored(usable)
            if strategy == "logprob-topk":
                kept = filter_logprob_topk(scored, fcfg["keep"])
                hist_values = [s.mean_logprob for s in scored]
                xlabel = "mean log-prob"
            elif strategy == "reranker-topk":
                kept = filter_reranker_topk(scored, fcfg["keep"], ctx.pointwise_scorer(), ctx.corpus)
                hist_values = [s.reranker_score for s in kept]
                xlabel = "reranker score"
            elif strategy == "consistency":
                kept = filter_consistency(scored, ctx.index, fcfg["top_k_retrieval"])
                hist_values = [s.mean_logprob for s in kept if s.mean_logprob is not None]
                xlabel = "mean log-prob (kept)"
            elif strategy == "random":
                from .filters import subsample

                kept = subsample(scored, min(fcfg["keep"], len(scored)), fcfg["seed"])
                hist_values = [s.mean_logprob for s in kept if s.mean_logprob is not None]
                xlabel = "mean log-prob (kept)"
            else:
                raise ConfigError(f"unknown filter strategy {strategy!r}")
            report.update({"input": len(generations), "kept": len(kept), "dropped": len(generations) - len(kept)})
            write_generations(paths["filtered"], [s.generation for s in kept])
            plots.save_score_histogram(
                [v for v in hist_values if v is not None],
                paths["filter_hist"],
                title=f"{strategy} score distribution",
                xlabel=xlabel,
            )
            outputs = [paths["filtered"], paths["filter_report"], paths["filter_hist"]]
        with open(paths["filter_report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        summary = f"filter[{strategy}]: kept {report['kept']} of {report['input']}"
        return outputs, {"report": report}, summary

    return _run_stage(
        cfg,
        "filter",
        ("filter", "scoring", "backend"),
        [input_file, cfg.path("dataset", "corpus")],
        runner,
    )


def _filter_margin_file(path: Path, L: float, H: float) -> tuple[list[dict], int]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    kept = [
        row
        for row in rows
        if all(L < row[k] < H for k in ("s_reference", "s_teacher", "s_student"))
    ]
    return kept, len(rows) - len(kept)


def cmd_triplets(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        tcfg = cfg["triplets"]
        template = resolve_template(tcfg["template"])
        pairs = sample_relevant_pairs(
            ctx.corpus, ctx.queries, ctx.qrels, n=tcfg["n_pairs"], seed=tcfg["seed"]
        )
        policy = ctx.example_policy(template, "sampled", tcfg["examples_k"], tcfg["seed"])
        scoring = cfg["scoring"]
        stats = TripletStats()
        prompts_by_doc: dict[str, str] = {}
        candidates = build_triplet_candidates(
            pairs,
            ctx.generator_backend("student"),
            ctx.generator_backend("teacher"),
            template,
            ctx.index,
            ctx.embedder,
            example_policy=policy,
            params=ctx.generation_params(),
            w_enc=scoring["w_enc"],
            w_bm25=scoring["w_bm25"],
            stats=stats,
            prompt_sink=prompts_by_doc,
        )
        with open(paths["candidates"], "w", encoding="utf-8") as fh:
            for cand in candidates:
                fh.write(
                    json.dumps(
                        {
                            "doc_id": cand.pair.doc.id,
                            "query_id": cand.pair.query.id,
                            "reference": cand.reference_query.text,
                            "teacher": cand.teacher_query.query_text,
                            "student": cand.student_query.query_text,
                            "s_reference": cand.s_reference,
                            "s_teacher": cand.s_teacher,
                            "s_student": cand.s_student,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        triplets = triplets_from_candidates(
            candidates, prompts_by_doc, L=tcfg["L"], H=tcfg["H"], stats=stats
        )
        write_triplets(paths["triplets"], triplets)
        report = {
            "pairs": stats.pairs,
            "candidates": len(candidates),
            "emitted": stats.emitted,
            "dropped_margin": stats.dropped_margin,
            "dropped_identical": stats.dropped_identical,
            "failed": stats.failed,
        }
        with open(paths["triplets_report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        all_scores = [
            s for c in candidates for s in (c.s_reference, c.s_teacher, c.s_student)
        ]
        plots.save_score_histogram(
            all_scores,
            paths["triplets_hist"],
            title="candidate relevance scores (reference, teacher, student)",
            xlabel="combined score",
            bounds=(tcfg["L"], tcfg["H"]),
        )
        summary = f"triplets: emitted {stats.emitted} of {stats.pairs} pairs"
        outputs = [paths["candidates"], paths["triplets"], paths["triplets_report"], paths["triplets_hist"]]
        return outputs, {"report": report}, summary

    return _run_stage(
        cfg,
        "triplets",
        ("dataset", "triplets", "backend", "generation", "scoring"),
        [cfg.path("dataset", "corpus"), cfg.path("dataset", "queries"), cfg.path("dataset", "qrels")],
        runner,
    )


def cmd_export_train(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        _require(paths["filtered"], "filter")
        generations = read_generations(paths["filtered"])
        kept = [ScoredQuery(generation=g) for g in generations if not g.degenerate]
        ecfg = cfg["export"]
        count = export_training_file(
            kept,
            ctx.index,
            ctx.corpus,
            n_negatives=ecfg["n_negatives"],
            seed=ecfg["seed"],
            path=paths["train"],
        )
        summary = f"export-train: wrote {count} lines -> {paths['train'].name}"
        return [paths["train"]], {"counts": {"lines": count, "queries": len(kept)}}, summary

    return _run_stage(
        cfg,
        "export-train",
        ("export", "scoring"),
        [paths["filtered"], cfg.path("dataset", "corpus")],
        runner,
    )


def cmd_retrieve(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        run = first_stage_retrieve(ctx.index, ctx.queries, k=cfg["evaluate"]["k_retrieve"])
        write_run(paths["run_bm25"], run)
        summary = f"retrieve: {len(run)} entries for {len(ctx.queries)} queries -> {paths['run_bm25'].name}"
        return [paths["run_bm25"]], {"counts": {"entries": len(run)}}, summary

    return _run_stage(
        cfg,
        "retrieve",
        ("dataset", "scoring", "evaluate"),
        [cfg.path("dataset", "corpus"), cfg.path("dataset", "queries")],
        runner,
    )


def cmd_rerank(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        _require(paths["run_bm25"], "retrieve")
        run = read_run(paths["run_bm25"])
        reranked = rerank(
            run,
            ctx.pointwise_scorer(),
            ctx.corpus,
            ctx.queries,
            top_k=cfg["evaluate"]["rerank_top_k"],
        )
        write_run(paths["run_rerank"], reranked)
        summary = f"rerank: {len(reranked)} entries -> {paths['run_rerank'].name}"
        return [paths["run_rerank"]], {"counts": {"entries": len(reranked)}}, summary

    return _run_stage(
        cfg,
        "rerank",
        ("scoring", "backend", "evaluate"),
        [paths["run_bm25"], cfg.path("dataset", "corpus"), cfg.path("dataset", "queries")],
        runner,
    )


def cmd_evaluate(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)
    which = cfg["evaluate"]["run"]
    if which == "rerank" or (which == "auto" and paths["run_rerank"].exists()):
        run_path = paths["run_rerank"]
    elif which in ("auto", "bm25"):
        run_path = paths["run_bm25"]
    else:
        run_path = Path(which)
        run_path = run_path if run_path.is_absolute() else cfg.base_dir / run_path

    def runner(fingerprint):
        _require(run_path, "retrieve")
        run = read_run(run_path)
        ecfg = cfg["evaluate"]
        ndcg = ndcg_at_k(run, ctx.qrels, k=ecfg["ndcg_k"])
        recall = recall_at_k(run, ctx.qrels, k=ecfg["recall_k"])
        payload = {
            "run": run_path.name,
            "config_hash": cfg.hash,
            "ndcg": ndcg.to_dict(),
            "recall": recall.to_dict(),
        }
        with open(paths["metrics"], "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        plots.save_metric_histogram(
            ndcg.per_query, paths["metrics_hist"], title=f"nDCG@{ecfg['ndcg_k']} per query"
        )
        summary = (
            f"evaluate[{run_path.name}]: nDCG@{ecfg['ndcg_k']} = {ndcg.mean:.4f}  "
            f"recall@{ecfg['recall_k']} = {recall.mean:.4f}  "
            f"({len(ndcg.per_query)} queries, {len(ndcg.excluded_query_ids)} excluded)"
        )
        return [paths["metrics"], paths["metrics_hist"]], {"ndcg_mean": ndcg.mean}, summary

    return _run_stage(
        cfg,
        "evaluate",
        ("dataset", "evaluate"),
        [run_path, cfg.path("dataset", "qrels")],
        runner,
    )


def cmd_ablate(cfg: PipelineConfig) -> StageResult:
    ctx = _Context(cfg)
    paths = _stage_paths(cfg)

    def runner(fingerprint):
        _require(paths["generations"], "generate")
        acfg = cfg["ablate"]
        generations = read_generations(paths["generations"])
        scored = [ScoredQuery(generation=g) for g in generations]
        bundle = AblationBundle(
            corpus=ctx.corpus,
            index=ctx.index,
            scorer=ctx.pointwise_scorer(),
            out_dir=cfg.out_dir,
            n_negatives=cfg["export"]["n_negatives"],
            seed=acfg["seed"],
        )
        rows = ablate_filter(scored, list(acfg["sizes"]), acfg["keep"], bundle)
        write_ablation_csv(paths["ablation"], rows)
        plots.save_ablation_bars(rows, paths["ablation_fig"])
        summary = "ablate: " + "; ".join(
            f"pool {r.pool_size} -> kept {r.kept}" for r in rows
        )
        outputs = [paths["ablation"], paths["ablation_fig"]]
        outputs += [Path(r.training_path) for r in rows]
        return outputs, {"rows": [(r.pool_size, r.kept) for r in rows]}, summary

    return _run_stage(
        cfg,
        "ablate",
        ("ablate", "export", "scoring", "backend"),
        [paths["generations"], cfg.path("dataset", "corpus")],
        runner,
    )


def cmd_validate_config(cfg: PipelineConfig) -> StageResult:
    # load_config already validated; reaching here means the config is sound
    return StageResult("validate-config", False, [], f"config ok (hash {cfg.hash})")
