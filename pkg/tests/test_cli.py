import json
import os

import pytest

from sprite_story_pkg import cli
from sprite_story_pkg.errors import NumericFailure, ValidationError
from sprite_story_pkg.synthdata import load_dataset, scenes_equal


def read_json(path):
    with open(path, encoding="utf-8") as json_file:
        return json.load(json_file)


@pytest.fixture
def workspace(tmp_path):
    return str(tmp_path / "ws")


def test_synth_writes_dataset_and_run_manifest(tmp_path, workspace):
    out_dir = str(tmp_path / "data")
    code = cli.main(["synth", "--count", "5", "--mix", "0.6", "--canvas-size", "32", "--seed", "2",
                     "--out", out_dir, "--workspace", workspace])
    assert code == 0
    dataset = load_dataset(out_dir)
    assert len(dataset) == 5
    assert sum(spec.num_characters == 1 for spec in dataset.specs()) == 3

    manifest = read_json(os.path.join(out_dir, cli.RUN_MANIFEST_NAME))
    assert manifest["command"] == "synth"
    assert manifest["seeds"] == {"dataset": 2}
    assert manifest["arguments"]["count"] == 5
    assert "handler" not in manifest["arguments"]
    assert os.path.exists(os.path.join(workspace, "logs", "synthdata.log"))


def test_three_characters_exit_with_validation_code(capsys, workspace):
    code = cli.main(["generate", "unused", "--ref", "1,2,3", "--prompt", "one sprite", "--workspace", workspace])
    assert code == 2
    assert capsys.readouterr().err.startswith("ERROR:")


def test_missing_checkpoint_exits_with_one(tmp_path, capsys, workspace):
    code = cli.main(["generate", str(tmp_path / "nowhere"), "--ref", "17", "--workspace", workspace])
    assert code == 1
    assert "ERROR:" in capsys.readouterr().err


@pytest.mark.parametrize("error,expected", [
    (ValidationError("bad"), 2),
    (NumericFailure("nan"), 3),
    (RuntimeError("boom"), 1),
    (KeyboardInterrupt(), 130),
])
def test_exit_codes(monkeypatch, workspace, error, expected):
    def failing(args):
        raise error

    monkeypatch.setattr(cli, "cmd_synth", failing)
    assert cli.main(["synth", "--workspace", workspace]) == expected


def test_generate_writes_images_and_manifest(tmp_path, base_checkpoint, workspace):
    out_dir = str(tmp_path / "story")
    code = cli.main([
        "generate", base_checkpoint, "--ref", "18", "--canvas-size", "32",
        "--prompt", "one sprite in the meadow", "--prompt", "one sprite waving",
        "--steps", "1", "--out", out_dir, "--workspace", workspace, "--quiet",
    ])
    assert code == 0
    assert sorted(f for f in os.listdir(out_dir) if f.endswith(".png")) == ["story_000.png", "story_001.png"]
    manifest = read_json(os.path.join(out_dir, cli.RUN_MANIFEST_NAME))
    assert manifest["command"] == "generate"
    assert len(manifest["checkpoint_hash"]) == 64


def test_eval_self_check_report(tmp_path, base_checkpoint, workspace):
    out_path = str(tmp_path / "reports" / "eval.json")
    code = cli.main([
        "eval", base_checkpoint, "--self-check", "--num-references", "2",
        "--out", out_path, "--workspace", workspace, "--quiet",
    ])
    assert code == 0
    report = read_json(out_path)
    assert report["n_samples"] == 2
    assert report["face_sim"] == pytest.approx(1.0, abs=1e-4)
    assert report["attn_iou"] is None
    assert read_json(os.path.join(str(tmp_path / "reports"), cli.RUN_MANIFEST_NAME))["command"] == "eval"


def test_inspect_attn_command(tmp_path, base_checkpoint, workspace):
    out_dir = str(tmp_path / "attention")
    code = cli.main([
        "inspect-attn", base_checkpoint, "--scene", "17,20", "--canvas-size", "32", "--timestep", "50",
        "--out", out_dir, "--workspace", workspace,
    ])
    assert code == 0
    leakage = read_json(os.path.join(out_dir, "leakage.json"))
    assert set(leakage["layers"]) == {"mid_1x1", "up_2x2", "up_4x4"}
    assert set(leakage["orientation"]) == {"rows", "columns", "entry"}


def test_train_command_from_base(tmp_path, base_checkpoint, workspace):
    data_dir = str(tmp_path / "data")
    assert cli.main(["synth", "--count", "4", "--canvas-size", "32", "--out", data_dir, "--workspace", workspace]) == 0
    out_dir = str(tmp_path / "run")
    code = cli.main([
        "train", "--dataset", data_dir, "--base", base_checkpoint, "--out", out_dir,
        "--total-steps", "2", "--phase-boundary", "1", "--batch-size", "2", "--workspace", workspace, "--quiet",
    ])
    assert code == 0
    assert os.path.exists(os.path.join(out_dir, "final", "manifest.json"))
    manifest = read_json(os.path.join(out_dir, cli.RUN_MANIFEST_NAME))
    assert manifest["seeds"] == {"seed": 0}
    assert manifest["config_hash"]


def test_train_rejects_inconsistent_schedule(tmp_path, workspace, capsys):
    code = cli.main(["train", "--total-steps", "10", "--phase-boundary", "20", "--workspace", workspace])
    assert code == 2
    assert "phase_boundary" in capsys.readouterr().err


def test_read_prompts_from_yaml_and_lines(tmp_path):
    listed = tmp_path / "prompts.yml"
    listed.write_text("- one sprite\n- one sprite waving\n")
    plain = tmp_path / "prompts.txt"
    plain.write_text("one sprite in the snow\n\nthe cave with one sprite\n")
    assert cli.read_prompts(["two sprites"], str(listed)) == ["two sprites", "one sprite", "one sprite waving"]
    assert cli.read_prompts([], str(plain)) == ["one sprite in the snow", "the cave with one sprite"]


def test_resolve_scene_sources(tmp_path, workspace):
    data_dir = str(tmp_path / "data")
    cli.main(["synth", "--count", "3", "--canvas-size", "32", "--out", data_dir, "--workspace", workspace])
    scene = cli.resolve_scene(f"{data_dir}@1")
    assert scenes_equal(scene, load_dataset(data_dir)[1])
    with pytest.raises(ValidationError):
        cli.resolve_scene(f"{data_dir}@7")

    built = cli.resolve_scene("17,20", seed=3, clothing="1,2", canvas_size=32)
    assert built.spec.identity_ids == (17, 20) and built.spec.clothing_ids == (1, 2)
    with pytest.raises(ValidationError):
        cli.parse_ids("1,x")
