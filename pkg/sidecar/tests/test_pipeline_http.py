"""Drive the pipeline CLI in http mode against the live sidecar: the same
stages the hermetic suite runs with in-process stand-ins run here over the
wire (generator, embedder, and scorer all HTTP).
"""

import json
import shutil
from pathlib import Path

import pytest

from qgen.cli import main as cli_main

REPO_ROOT = Path(__file__).resolve().parent.parent.parent
MINI_DIR = REPO_ROOT / "src" / "qgen" / "data" / "mini"

CONFIG_TEMPLATE = """
[dataset]
corpus = "data/corpus.jsonl"
queries = "data/queries.jsonl"
qrels = "data/qrels.tsv"

[prompt]
template = "inpars-plus"
examples = "sampled"
examples_k = 2

[backend]
mode = "http"
generator_url = "{base}"
generator_model = "words"
embedder = "http"
embedder_url = "{base}"
scorer = "http"
scorer_url = "{base}"

[generation]
n = 30
concurrency = 4

[filter]
strategy = "logprob-topk"
keep = 10

[triplets]
n_pairs = 5
seed = 7

[evaluate]
k_retrieve = 30
rerank_top_k = 5
recall_k = 10

[output]
out_dir = "out"
"""


@pytest.fixture()
def http_workspace(tmp_path, live_sidecar):
    (tmp_path / "data").mkdir()
    for name in ("corpus.jsonl", "queries.jsonl", "qrels.tsv"):
        shutil.copy(MINI_DIR / name, tmp_path / "data" / name)
    config = tmp_path / "pipeline.toml"
    config.write_text(CONFIG_TEMPLATE.format(base=live_sidecar))
    return config


def run(config, stage):
    return cli_main([stage, "--config", str(config)])


def test_pipeline_stages_over_the_wire(http_workspace, tmp_path):
    for stage in ("generate", "filter", "triplets", "retrieve", "rerank", "evaluate"):
        assert run(http_workspace, stage) == 0, stage

    out = tmp_path / "out"
    generations = [
        json.loads(line) for line in (out / "generations.jsonl").read_text().splitlines()
    ]
    assert len(generations) == 30
    assert all(g["log_probs"] for g in generations)
    assert all(lp <= 0 for g in generations for lp in g["log_probs"])

    filtered = (out / "filtered.jsonl").read_text().splitlines()
    assert len(filtered) == 10

    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["ndcg"]["mean"] <= 1.0
    assert metrics["run"] == "run_rerank.trec"


def test_http_generate_is_reproducible(http_workspace, tmp_path):
    assert run(http_workspace, "generate") == 0
    first = (tmp_path / "out" / "generations.jsonl").read_bytes()
    manifest = tmp_path / "out" / "manifest.json"
    state = json.loads(manifest.read_text())
    del state["stages"]["generate"]
    manifest.write_text(json.dumps(state))
    (tmp_path / "out" / "generations.checkpoint.jsonl").unlink()
    assert run(http_workspace, "generate") == 0
    assert (tmp_path / "out" / "generations.jsonl").read_bytes() == first
