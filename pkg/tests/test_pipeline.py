"""
Pipeline and CLI tests: full run, caching, manifest, report, input validation.
Run: pytest tests/test_pipeline.py -v
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from cli.main import main
from phenotyper.config import STAGE_NAMES, PipelineConfig, config_hash
from phenotyper.errors import ConfigError, ReportError
from phenotyper.pipeline import MANIFEST, report, run_directory, run_pipeline
from phenotyper.storage import load_embeddings

SAMPLE_COHORT = PROJECT_ROOT / "data" / "sample_cohort.jsonl"


def small_config(out_dir, **extra) -> PipelineConfig:
    data = {
        "seed": 7,
        "out_dir": str(out_dir),
        "synth": {"n_patients": 60, "n_entities": 12, "rank": 2},
        "pools": {"n_cases": 100, "n_controls": 300},
        "embedding": {"d": 8, "epochs": 2},
        "factorization": {"rank": 2, "max_iters": 60, "lambda": 0.05},
        "evaluation": {"penalized": True},
        "export": {"p_threshold": 1.0, "top_k": 5},
    }
    data.update(extra)
    return PipelineConfig.model_validate(data)


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    config = small_config(tmp_path_factory.mktemp("runs"))
    return config, run_pipeline(config)


def test_full_run_writes_every_stage(first_run):
    config, result = first_run
    assert result.exit_status == 0
    assert result.artifact_dir == run_directory(config)
    assert [r["name"] for r in result.manifest["stages"]] == list(STAGE_NAMES)
    assert all(r["status"] == "ran" for r in result.manifest["stages"])
    root = result.artifact_dir
    for rel in (
        "cohort/cohort.jsonl",
        "cohort/true_B.csv",
        "match/result.json",
        "match/bias_table.csv",
        "embed/similarity.npy",
        "tensorize/tensor.csv",
        "tensorize/tensor.json",
        "fit/model/A.csv",
        "fit/trace.csv",
        "evaluate/metrics.json",
        "evaluate/significance.csv",
        "evaluate/stratification.csv",
        "export/index.json",
    ):
        assert (root / rel).exists(), rel


def test_manifest_contents(first_run):
    config, result = first_run
    manifest = json.loads((result.artifact_dir / MANIFEST).read_text())
    assert manifest["config_hash"] == config_hash(config)
    assert manifest["status"] == "ok"
    assert manifest["failed_stage"] is None
    assert set(manifest["seeds"]) == set(STAGE_NAMES)
    assert len(set(manifest["seeds"].values())) == len(STAGE_NAMES)


def test_embedding_artifacts_match_similarity(first_run):
    _, result = first_run
    table, codes = load_embeddings(result.artifact_dir / "embed" / "embeddings.csv")
    S = np.load(result.artifact_dir / "embed" / "similarity.npy")
    assert table.input_vectors.shape == (len(codes), 8)
    assert S.shape == (len(codes), len(codes))
    match = json.loads((result.artifact_dir / "match" / "result.json").read_text())
    assert isinstance(match["degenerate_covariates"], list)


def test_exported_graphs_listed(first_run):
    _, result = first_run
    index = json.loads((result.artifact_dir / "export" / "index.json").read_text())
    assert index["format"] == "dot"
    for entry in index["graphs"]:
        text = (result.artifact_dir / "export" / entry["file"]).read_text()
        assert text.startswith("digraph phenotypes {")
        assert text.count("->") == entry["edges"]


def test_rerun_is_fully_cached(first_run):
    config, result = first_run
    again = run_pipeline(config)
    assert again.exit_status == 0
    assert again.artifact_dir == result.artifact_dir
    assert all(r["status"] == "cached" for r in again.manifest["stages"])


def test_report_sections(first_run):
    _, result = first_run
    text = report(result.artifact_dir)
    for heading in (
        "== Chi-square (matched cohort) ==",
        "== Matched-cohort standardized bias (%) ==",
        "== Metrics ==",
        "== Significant phenotypes ==",
        "== Exported graphs ==",
        "== Stages ==",
    ):
        assert heading in text
    assert "planted factor recovery=" in text


def artifact_tree(root: Path) -> dict[str, bytes]:
    """Relative path -> bytes for every file under a run directory; stage timings zeroed in the manifest."""
    tree = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel == MANIFEST:
            manifest = json.loads(path.read_text())
            for record in manifest["stages"]:
                record["seconds"] = 0.0
            tree[rel] = json.dumps(manifest, sort_keys=True).encode()
        else:
            tree[rel] = path.read_bytes()
    return tree


def test_same_config_gives_identical_artifact_tree(tmp_path):
    one = run_pipeline(small_config(tmp_path / "one"))
    two = run_pipeline(small_config(tmp_path / "two"))
    ours, theirs = artifact_tree(one.artifact_dir), artifact_tree(two.artifact_dir)
    assert sorted(ours) == sorted(theirs)
    assert "fit/model/A.csv" in ours and MANIFEST in ours
    for rel in ours:
        assert ours[rel] == theirs[rel], rel


def test_missing_input_fails_before_any_stage(tmp_path):
    config = small_config(tmp_path, cohort_path=str(tmp_path / "absent.jsonl"))
    with pytest.raises(ConfigError, match="absent.jsonl"):
        run_pipeline(config)
    assert not run_directory(config).exists()


def test_disabled_matching_noted_in_report(tmp_path):
    stages = {name: name != "match" for name in STAGE_NAMES}
    result = run_pipeline(small_config(tmp_path, stages=stages))
    assert result.exit_status == 0
    statuses = {r["name"]: r["status"] for r in result.manifest["stages"]}
    assert statuses["match"] == "disabled"
    assert statuses["export"] == "ran"
    assert "bias table omitted" in report(result.artifact_dir)


def test_stage_after_disabled_upstream_fails(tmp_path):
    stages = {name: name != "tensorize" for name in STAGE_NAMES}
    result = run_pipeline(small_config(tmp_path, stages=stages))
    assert result.exit_status == 1
    assert result.manifest["failed_stage"] == "fit"
    assert (result.artifact_dir / "cohort" / "cohort.jsonl").exists()


def test_ingested_sample_cohort(tmp_path):
    config = small_config(
        tmp_path,
        cohort_path=str(SAMPLE_COHORT),
        stages={name: name != "match" for name in STAGE_NAMES},
        factorization={"rank": 2, "max_iters": 30},
        evaluation={"test_fraction": 0.5, "penalized": True},
    )
    result = run_pipeline(config)
    assert result.exit_status == 0
    assert not (result.artifact_dir / "cohort" / "true_B.csv").exists()


def test_corrupted_manifest(tmp_path):
    (tmp_path / MANIFEST).write_text("{not json", encoding="utf-8")
    with pytest.raises(ReportError, match=MANIFEST):
        report(tmp_path)


def test_report_without_manifest(tmp_path):
    with pytest.raises(ReportError):
        report(tmp_path)


# --- CLI ---


def test_cli_report(first_run, capsys):
    _, result = first_run
    assert main(["report", str(result.artifact_dir)]) == 0
    assert "== Metrics ==" in capsys.readouterr().out


def test_cli_report_error_exit(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_cli_synth_then_tensorize(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--patients", "30", "--entities", "8", "--true-rank", "2"]) == 0
    out = capsys.readouterr().out
    assert "Wrote cohort:" in out
    cohort_file = tmp_path / "synth" / "cohort.jsonl"
    assert cohort_file.exists()
    assert main(["tensorize", "--out", str(tmp_path), "--cohort", str(cohort_file), "--mode", "counts"]) == 0
    meta = json.loads((tmp_path / "tensorize" / "tensor.json").read_text())
    assert meta["mode"] == "counts"
    assert meta["shape"][0] == 30


def test_cli_run_with_flags(tmp_path, capsys):
    config = tmp_path / "pipeline.toml"
    config.write_text(
        "[synth]\nn_patients = 40\nn_entities = 10\nrank = 2\n"
        "[pools]\nn_cases = 60\nn_controls = 200\n"
        "[embedding]\nd = 8\nepochs = 1\n"
        "[evaluation]\npenalized = true\n",
        encoding="utf-8",
    )
    code = main(["run", "--config", str(config), "--out", str(tmp_path / "out"), "--rank", "2", "--max-iters", "20"])
    assert code == 0
    out = capsys.readouterr().out
    assert out.startswith("Artifacts: ")
    assert "export" in out


def test_cli_bad_config_key(tmp_path, capsys):
    config = tmp_path / "pipeline.toml"
    config.write_text("[factorization]\nranks = 3\n", encoding="utf-8")
    assert main(["run", "--config", str(config), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
