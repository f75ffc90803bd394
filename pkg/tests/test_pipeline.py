"""Integration test: a miniature full pipeline run, both tone-source modes."""

import numpy as np
import pytest

from dermdiff.config import ExperimentConfig
from dermdiff.pipeline import run_pipeline

TINY = {
    "corpus.count_benign_a": 14, "corpus.count_benign_b": 14, "corpus.count_benign_c": 14,
    "corpus.count_malignant_a": 14, "corpus.count_malignant_b": 14, "corpus.count_malignant_c": 14,
    "vae.epochs": 2, "diffusion.steps": 40, "diffusion.t": 30,
    "diffusion.base_channels": 8, "sample.per_cell": 3,
    "classifier.tone.epochs": 2, "classifier.disease.epochs": 2,
    "metrics.msssim_pairs": 8,
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    cfg = ExperimentConfig(TINY)
    paths = run_pipeline(cfg, out_dir=out, log=lambda *_: None)
    return out, paths


def test_pipeline_produces_all_artifacts(tiny_run):
    out, paths = tiny_run
    for key in ("corpus_manifest", "synthetic_manifest", "tone_clf", "vae", "dermdiff",
                "disease_real", "disease_mix", "report_markdown", "report_grouped",
                "report_fairness", "report_fid", "report_msssim", "roc", "run_manifest"):
        assert key in paths and paths[key].exists(), key
    assert (out / "corpus").is_dir() and (out / "synthetic").is_dir()


def test_pipeline_report_contents(tiny_run):
    _, paths = tiny_run
    md = paths["report_markdown"].read_text()
    assert "config_hash" in md and "tone_source: oracle" in md
    grouped = paths["report_grouped"].read_text()
    assert grouped.count("\n") >= 2  # header + two variants
    fid_rows = paths["report_fid"].read_text().splitlines()
    assert fid_rows[0].startswith("compared_set_a")
    assert len(fid_rows) >= 2


def test_pipeline_synthetic_counts(tiny_run):
    _, paths = tiny_run
    lines = paths["synthetic_manifest"].read_text().strip().splitlines()[1:]
    assert len(lines) == 18  # 3 per cell x 6 cells
    diseases = [l.split(",")[2] for l in lines]
    assert diseases.count("benign") == 9 and diseases.count("malignant") == 9


def test_pipeline_predicted_tone_mode(tmp_path):
    cfg = ExperimentConfig({**TINY, "evaluate.tone_source": "predicted"})
    paths = run_pipeline(cfg, out_dir=tmp_path / "pred", log=lambda *_: None)
    md = paths["report_markdown"].read_text()
    assert "tone_source: predicted" in md


def test_pipeline_config_saved_and_hash_stable(tiny_run):
    out, paths = tiny_run
    saved = ExperimentConfig.load(paths["config"])
    assert saved == ExperimentConfig(TINY)
