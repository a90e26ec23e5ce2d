import json

import pytest

from pipeline_helpers import (
    FIGURES,
    GOLDEN_ARTIFACTS,
    GOLDEN_DIR,
    STAGE_ORDER,
    run_all_stages,
    run_stage,
    setup_workspace,
)
from qgen.cli import main as cli_main


@pytest.fixture()
def workspace(tmp_path):
    return setup_workspace(tmp_path)


def test_validate_config(workspace, capsys):
    assert run_stage(workspace, "validate-config") == 0
    assert "config ok" in capsys.readouterr().out


def test_missing_corpus_is_preflight_config_error(tmp_path, capsys):
    config = setup_workspace(tmp_path)
    (tmp_path / "data" / "corpus.jsonl").unlink()
    assert run_stage(config, "generate") == 1
    assert "corpus" in capsys.readouterr().err


def test_stage_out_of_order_is_runtime_error(workspace, capsys):
    assert run_stage(workspace, "filter") == 2
    assert "qgen generate" in capsys.readouterr().err


def test_unknown_config_key_exit_code(tmp_path, capsys):
    config = setup_workspace(tmp_path)
    config.write_text(config.read_text() + "\n[generation]\nbogus = 1\n")
    assert run_stage(config, "generate") == 1


def test_full_pipeline_matches_goldens(workspace, tmp_path):
    run_all_stages(workspace)
    out = tmp_path / "out"
    for name in GOLDEN_ARTIFACTS:
        got = (out / name).read_bytes()
        want = (GOLDEN_DIR / "out" / name).read_bytes()
        assert got == want, f"{name} deviates from golden"
    for name in FIGURES:
        assert (out / name).exists(), f"missing figure {name}"
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGE_ORDER)


def test_rerun_is_skipped_up_to_date(workspace, capsys):
    assert run_stage(workspace, "generate") == 0
    capsys.readouterr()
    assert run_stage(workspace, "generate") == 0
    assert "up to date" in capsys.readouterr().out


def test_config_change_invalidates_stage(workspace, capsys):
    assert run_stage(workspace, "generate") == 0
    text = workspace.read_text().replace("n = 120", "n = 60")
    workspace.write_text(text)
    capsys.readouterr()
    assert run_stage(workspace, "generate") == 0
    out = capsys.readouterr().out
    assert "up to date" not in out
    assert "60 generations" in out


def test_stage_outputs_embed_config_hash(workspace, tmp_path):
    run_stage(workspace, "generate")
    from qgen.config import load_config

    cfg = load_config(workspace)
    meta = json.loads((tmp_path / "out" / "generate.meta.json").read_text())
    assert meta["config_hash"] == cfg.hash


def test_interrupted_generate_resumes_identically(workspace, tmp_path):
    """Reproduce the state a mid-run kill leaves behind (partial append-only
    checkpoint with a torn final line, no manifest completion, no final
    artifact) and let the CLI finish the job.
    """
    assert run_stage(workspace, "generate") == 0
    out = tmp_path / "out"
    ckpt = out / "generations.checkpoint.jsonl"
    complete_lines = ckpt.read_text().splitlines(keepends=True)

    # keep 40 whole records plus a torn 41st, as a crash between write and
    # fsync would; forget the completion flag and the materialized file
    ckpt.write_text("".join(complete_lines[:40]) + complete_lines[40][: len(complete_lines[40]) // 2])
    (out / "generations.jsonl").unlink()
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    del manifest["stages"]["generate"]
    manifest_path.write_text(json.dumps(manifest))

    assert run_stage(workspace, "generate") == 0
    got = (out / "generations.jsonl").read_bytes()
    want = (GOLDEN_DIR / "out" / "generations.jsonl").read_bytes()
    assert got == want
    meta = json.loads((out / "generate.meta.json").read_text())
    assert meta["counts"]["resumed"] == 40


def test_stagewise_equals_goldens_with_fresh_processes(workspace, tmp_path):
    """Each stage in its own CLI invocation (the stage-boundary kill/resume
    contract: state crosses invocations only through files)."""
    for stage in STAGE_ORDER:
        assert cli_main([stage, "--config", str(workspace)]) == 0
    for name in GOLDEN_ARTIFACTS:
        assert (tmp_path / "out" / name).read_bytes() == (
            GOLDEN_DIR / "out" / name
        ).read_bytes()


def test_ablate_flag_overrides(workspace, tmp_path, capsys):
    assert run_stage(workspace, "generate") == 0
    assert run_stage(workspace, "ablate", "--sizes", "30,60", "--keep", "10") == 0
    lines = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert lines == ["pool_size,kept,ndcg10", "30,10,", "60,10,"]


def test_seed_override_changes_sampling(workspace, tmp_path):
    run_stage(workspace, "generate")
    assert run_stage(workspace, "triplets", "--seed", "99") == 0
    first = (tmp_path / "out" / "triplets.jsonl").read_bytes()
    assert run_stage(workspace, "triplets", "--seed", "100") == 0
    second = (tmp_path / "out" / "triplets.jsonl").read_bytes()
    assert first != second


@pytest.mark.parametrize("strategy", ["reranker-topk", "consistency", "random"])
def test_filter_strategies_through_cli(workspace, tmp_path, strategy):
    assert run_stage(workspace, "generate") == 0
    text = workspace.read_text().replace(
        'strategy = "logprob-topk"', f'strategy = "{strategy}"'
    )
    if strategy == "random":
        text = text.replace("keep = 40", "keep = 25")
    workspace.write_text(text)
    assert run_stage(workspace, "filter") == 0
    report = json.loads((tmp_path / "out" / "filter_report.json").read_text())
    assert report["strategy"] == strategy
    assert report["kept"] + report["dropped"] == report["input"]
    assert (tmp_path / "out" / "filtered.jsonl").exists()
    assert (tmp_path / "out" / "filter_scores.png").exists()


def test_margin_filter_through_cli(workspace, tmp_path):
    assert run_stage(workspace, "triplets") == 0
    text = workspace.read_text().replace(
        'strategy = "logprob-topk"', 'strategy = "margin"'
    )
    workspace.write_text(text)
    assert run_stage(workspace, "filter") == 0
    report = json.loads((tmp_path / "out" / "filter_report.json").read_text())
    assert report["strategy"] == "margin"
    assert report["input"] == 20  # one candidate per sampled pair
    assert report["kept"] == 18  # two noise-corrupted students fall outside
    kept = (tmp_path / "out" / "filtered_candidates.jsonl").read_text().splitlines()
    assert len(kept) == report["kept"]
