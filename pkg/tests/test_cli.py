"""
Integration tests for the command-line entry point.
"""
import json

import pytest
import torch
import yaml

from inverter.domain import FacialTemplate
from inverter.generators import load_checkpoint, save_checkpoint
from inverter.interchange import write_templates
from inverter.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = {
    "resolution": 32,
    "template_dim": 16,
    "width_divisor": 16,
    "device": "cpu",
    "impostor_ratio": 2,
    "far_levels": [0.1],
    "stage1": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001},
    "stage2": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001},
    "stage3": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001},
    "synth": {"n_subjects": 4, "images_per_subject": 3, "test_fraction": 0.5},
    "extractor_training": {"epochs": 1, "batch_size": 8, "width": 4},
}


def write_config(path, **overrides):
    path.write_text(yaml.safe_dump({**TINY, **overrides}))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesize a tiny dataset and train one full run on it."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "tiny.yaml", manifest_path=str(root / "data" / "manifest.jsonl"))
    assert main(["synth", "--config", config, "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", config, "--out", str(root / "run")]) == EXIT_OK
    return root, config


def test_synth_rejects_zero_counts(tmp_path):
    """Test that non-positive counts are usage errors."""
    with pytest.raises(SystemExit) as excinfo:
        main(["synth", "--subjects", "0", "--out", str(tmp_path)])
    assert excinfo.value.code == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    """Test that schema violations exit with code 2."""
    config = write_config(tmp_path / "bad.yaml", learning_rate=0.1)
    assert main(["synth", "--config", config, "--out", str(tmp_path / "data")]) == EXIT_USAGE


def test_bad_env_and_synth_section_are_usage_errors(tmp_path, monkeypatch):
    """Test that malformed overrides and empty synth counts exit with code 2."""
    config = write_config(tmp_path / "tiny.yaml")
    monkeypatch.setenv("INVERTER_SEED", "abc")
    assert main(["synth", "--config", config, "--out", str(tmp_path / "a")]) == EXIT_USAGE
    monkeypatch.delenv("INVERTER_SEED")

    zero = write_config(tmp_path / "zero.yaml", synth={"n_subjects": 0, "images_per_subject": 3})
    assert main(["synth", "--config", zero, "--out", str(tmp_path / "b")]) == EXIT_USAGE


def test_synth_is_deterministic(tmp_path):
    """Test that the same seed writes identical files."""
    config = write_config(tmp_path / "tiny.yaml")
    for name in ("a", "b"):
        args = ["synth", "--config", config, "--out", str(tmp_path / name), "--subjects", "2",
                "--images-per-subject", "2", "--seed", "3"]
        assert main(args) == EXIT_OK
    manifest_a = (tmp_path / "a" / "manifest.jsonl").read_text()
    assert manifest_a == (tmp_path / "b" / "manifest.jsonl").read_text()
    assert len(manifest_a.splitlines()) == 4
    for image in (tmp_path / "a" / "images").glob("*.png"):
        assert image.read_bytes() == (tmp_path / "b" / "images" / image.name).read_bytes()


def test_train_writes_run_directory(workspace):
    """Test checkpoints, metrics, config snapshots and history."""
    root, _ = workspace
    run = root / "run"
    for stage in (1, 2, 3):
        assert (run / "checkpoints" / f"stage{stage}.pt").exists()
    assert (run / "config.yaml").exists() and (run / "config.resolved.yaml").exists()
    assert (run / "extractors" / "target_seed0.pt").exists()
    events = [json.loads(line)["event_type"] for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert events[0] == "run_start"
    assert events.count("stage_end") == 3
    history = json.loads((run / "history.json").read_text())
    assert history["row"] == 6 and history["cancelled"] == []


def test_train_stage_out_of_order(workspace, tmp_path):
    """Test that starting at stage 2 without a checkpoint fails."""
    _, config = workspace
    code = main(["train", "--config", config, "--out", str(tmp_path / "run"), "--stage", "2"])
    assert code == EXIT_RUNTIME


def test_train_resume(workspace, tmp_path):
    """Test resuming a run after stage 2."""
    root, config = workspace
    run = tmp_path / "resumed"
    (run / "extractors").mkdir(parents=True)
    (run / "extractors" / "target_seed0.pt").write_bytes((root / "run" / "extractors" / "target_seed0.pt").read_bytes())
    args = ["train", "--config", config, "--out", str(run), "--resume", str(root / "run" / "checkpoints" / "stage2.pt")]
    assert main(args) == EXIT_OK
    history = json.loads((run / "history.json").read_text())
    assert [h["stage"] for h in history["history"]] == [3]


def test_train_rejects_mid_stage_checkpoint(workspace, tmp_path):
    """Test that a periodic checkpoint cannot be used to resume."""
    root, config = workspace
    model, _ = load_checkpoint(root / "run" / "checkpoints" / "stage1.pt")
    periodic = save_checkpoint(model, tmp_path / "stage2_epoch001.pt", stage=2, seed=0, extra={"epoch": 1})
    args = ["train", "--config", config, "--out", str(tmp_path / "run"), "--resume", str(periodic)]
    assert main(args) == EXIT_USAGE
    assert not (tmp_path / "run" / "checkpoints").exists()


def test_eval_and_external_pairs(workspace, tmp_path):
    """Test evaluation, pair export and re-scoring the exported pairs."""
    root, config = workspace
    checkpoint = str(root / "run" / "checkpoints" / "stage3.pt")
    out = tmp_path / "eval"
    assert main(["eval", "--config", config, "--checkpoint", checkpoint, "--out", str(out),
                 "--extractor", "toy"]) == EXIT_OK
    reports = json.loads((out / "report.json").read_text())["reports"]
    assert [r["role"] for r in reports] == ["target", "unseen"]
    assert set(reports[0]["tar_at"]) == {"type1", "type2"}
    assert (out / "pairs_type1.jsonl").exists() and (out / "pairs_type2.jsonl").exists()

    rescored = tmp_path / "rescored"
    assert main(["eval", "--config", config, "--checkpoint", checkpoint, "--out", str(rescored),
                 "--pairs", str(out / "pairs_type1.jsonl")]) == EXIT_OK
    assert main(["report", str(rescored / "report.json")]) == EXIT_OK


def test_invert_from_images_and_templates(workspace, tmp_path):
    """Test both reconstruction sources and the dimension check."""
    root, config = workspace
    checkpoint = str(root / "run" / "checkpoints" / "stage3.pt")
    out = tmp_path / "faces"
    assert main(["invert", "--config", config, "--checkpoint", checkpoint, "--out", str(out),
                 "--images", str(root / "data" / "manifest.jsonl")]) == EXIT_OK
    assert (out / "grid.png").exists()
    assert len(list(out.glob("subject_*.png"))) == 12

    torch.manual_seed(0)
    templates = write_templates([("query", FacialTemplate(torch.randn(16)))], tmp_path / "t16.jsonl")
    assert main(["invert", "--config", config, "--checkpoint", checkpoint, "--out", str(tmp_path / "query"),
                 "--templates", str(templates)]) == EXIT_OK
    assert (tmp_path / "query" / "query.png").exists()

    wrong = write_templates([("query", FacialTemplate(torch.randn(8)))], tmp_path / "t8.jsonl")
    assert main(["invert", "--config", config, "--checkpoint", checkpoint, "--out", str(tmp_path / "wrong"),
                 "--templates", str(wrong)]) == EXIT_RUNTIME


def test_ablate_single_row(workspace, tmp_path):
    """Test running one ablation row."""
    _, config = workspace
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", config, "--out", str(out), "--rows", "3"]) == EXIT_OK
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [r["row"] for r in rows] == [3]


def test_missing_manifest_is_runtime_error(tmp_path):
    """Test that a missing manifest fails with code 1."""
    config = write_config(tmp_path / "tiny.yaml", manifest_path=str(tmp_path / "nothing.jsonl"))
    assert main(["train", "--config", config, "--out", str(tmp_path / "run")]) == EXIT_RUNTIME


def test_report_missing_file(tmp_path):
    """Test that an unreadable report fails with code 1."""
    assert main(["report", str(tmp_path / "absent.json")]) == EXIT_RUNTIME
