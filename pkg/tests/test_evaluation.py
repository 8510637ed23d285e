import json
import os

import numpy as np
import pytest
import torch
import yaml

from conftest import random_masks
from sprite_story_pkg.config import EvalConfig
from sprite_story_pkg.errors import ValidationError
from sprite_story_pkg.evaluation import (
    LEAKAGE_ORIENTATION,
    Evaluation,
    attention_iou,
    binarize_maps,
    cmd_eval,
    diagonal_dominance,
    leakage_matrix,
    load_pose_file,
    locate_face,
    pose_error,
    target_scenes,
)
from sprite_story_pkg.losses import downsample_masks
from sprite_story_pkg.synthdata import HELDOUT_IDENTITIES, SceneSpec, generate_dataset, generate_scene


def small_eval_config(**overrides) -> EvalConfig:
    values = dict(steps=2, prompts_per_ref=2, guidance=2.0, record_timestep=50, num_references=2)
    values.update(overrides)
    return EvalConfig.from_dict(values)


@pytest.fixture
def eval_set():
    return generate_dataset(2, mix=1.0, seed=3, identity_pool=HELDOUT_IDENTITIES, canvas_size=32)


@pytest.fixture
def evaluation(tmp_path):
    return Evaluation(str(tmp_path / "ws"), small_eval_config())


@pytest.fixture
def model(evaluation, base_checkpoint):
    return evaluation.load(base_checkpoint)


def test_leakage_columns_sum_to_one():
    generator = torch.Generator().manual_seed(0)
    maps = torch.rand(3, 4, 4, generator=generator, dtype=torch.float64).softmax(dim=0)
    masks = random_masks(1, 3, 8, seed=2)[0]
    matrix = leakage_matrix(maps, masks)
    assert matrix.shape == (3, 3)
    assert np.allclose(matrix.sum(axis=0), 1.0)

    # rows weighted by mask area give each region's total attention mass
    areas = downsample_masks(masks, (4, 4))[0].flatten(1).sum(dim=1).double().numpy()
    assert np.allclose((matrix * areas[None, :]).sum(axis=1), maps.sum(dim=(1, 2)).numpy())


def test_converged_maps_give_an_identity_leakage_matrix():
    masks = np.zeros((3, 4, 4), dtype=np.uint8)
    masks[0, :2] = 1
    masks[1, 2:, :2] = 1
    masks[2, 2:, 2:] = 1
    maps = downsample_masks(masks, (4, 4))[0].double()
    matrix = leakage_matrix(maps, masks)
    assert np.allclose(matrix, np.eye(3))
    assert diagonal_dominance(matrix) == pytest.approx(1.0)

    uniform = torch.full((3, 4, 4), 1.0 / 3.0, dtype=torch.float64)
    assert diagonal_dominance(leakage_matrix(uniform, masks)) == pytest.approx(1.0 / 3.0)


def test_attention_iou_of_exact_and_uniform_maps():
    masks = np.zeros((1, 2, 4, 4), dtype=np.uint8)
    masks[0, 0, :, :3] = 1
    masks[0, 1, :, 3:] = 1
    exact = torch.from_numpy(masks).float()
    assert attention_iou(exact, masks) == pytest.approx(1.0)
    uniform = torch.full((1, 2, 4, 4), 0.5)
    assert binarize_maps(uniform).all()
    assert attention_iou(uniform, masks) == pytest.approx((12 / 16 + 4 / 16) / 2)


def test_face_locator_and_pose_error(single_scene):
    character = single_scene.characters[0]
    found = locate_face(single_scene.image, character.identity_id)
    assert found is not None
    head = single_scene.keypoints[0, 0]
    assert np.hypot(found[0] - head[0], found[1] - head[1]) < 4.0
    assert pose_error([single_scene.image], [single_scene]) < 4.0
    assert pose_error([np.zeros_like(single_scene.image)], [single_scene]) is None


def test_target_scenes_keep_the_characters(single_scene):
    targets = target_scenes(single_scene, 3, seed=1)
    assert len(targets) == 3
    assert {t.spec.identity_ids for t in targets} == {single_scene.spec.identity_ids}
    assert len({t.spec.pose_seed for t in targets}) == 3
    assert targets == target_scenes(single_scene, 3, seed=1)


def test_pose_file_formats(tmp_path):
    keypoints = [[16.0, 6.0], [16.0, 10.0], [16.0, 18.0], [10.0, 14.0], [22.0, 14.0], [13.0, 28.0], [19.0, 28.0]]
    yaml_path = tmp_path / "pose.yml"
    yaml_path.write_text(yaml.safe_dump(keypoints))
    npy_path = str(tmp_path / "pose.npy")
    np.save(npy_path, np.asarray([keypoints]))

    from_yaml = load_pose_file(str(yaml_path), 32)
    assert from_yaml.shape == (7, 32, 32)
    assert np.array_equal(from_yaml, load_pose_file(npy_path, 32))

    np.save(npy_path, np.asarray([keypoints] * 3))
    with pytest.raises(ValidationError, match="at most 2"):
        load_pose_file(npy_path, 32)


def test_self_check_scores_references_against_themselves(evaluation, model, eval_set):
    report = evaluation.evaluate(model, eval_set, self_check=True)
    assert report.face_sim == pytest.approx(1.0, abs=1e-4)
    assert report.char_sim == pytest.approx(1.0, abs=1e-4)
    assert report.attn_iou is None and report.baseline_face_sim is None
    assert report.n_samples == len(eval_set)


def test_training_identities_are_refused(evaluation, model):
    train_set = generate_dataset(1, mix=1.0, seed=0, canvas_size=32)
    with pytest.raises(ValidationError, match="training identities"):
        evaluation.evaluate(model, train_set, self_check=True)


def test_smoke_evaluation_on_a_base_checkpoint(evaluation, model, eval_set):
    report = evaluation.evaluate(model, eval_set)
    assert report.n_samples == 4
    for value in (report.face_sim, report.char_sim, report.clip_t_analog, report.baseline_face_sim):
        assert np.isfinite(value) and -1.0 - 1e-6 <= value <= 1.0 + 1e-6
    assert 0.0 <= report.attn_iou <= 1.0


def test_report_is_byte_identical_across_runs(tmp_path, base_checkpoint, eval_set):
    paths = [str(tmp_path / f"eval_{i}.json") for i in range(2)]
    for path in paths:
        cmd_eval(base_checkpoint, path, eval_set, prompts_per_ref=1, workspace=str(tmp_path / "ws"),
                 eval_config=small_eval_config(), baseline=False)
    with open(paths[0], "rb") as first, open(paths[1], "rb") as second:
        assert first.read() == second.read()
    with open(paths[0], encoding="utf-8") as report_file:
        assert set(json.load(report_file)) >= {"face_sim", "char_sim", "clip_t_analog", "attn_iou", "n_samples"}


def test_generate_writes_one_image_per_prompt(tmp_path, evaluation, model, single_scene):
    prompts = ["one sprite in the meadow", "one sprite waving at night", "the cave with one sprite"]
    out_dir = str(tmp_path / "story")
    paths, digest = evaluation.generate(model, single_scene, prompts, out_dir, steps=2, seed=4)
    assert [os.path.basename(p) for p in paths] == ["story_000.png", "story_001.png", "story_002.png"]
    assert all(os.path.exists(p) for p in paths)
    assert len(digest) == 64

    again, same_digest = evaluation.generate(model, single_scene, prompts[:1], str(tmp_path / "again"), steps=2, seed=4)
    assert same_digest == digest
    with open(paths[0], "rb") as first, open(again[0], "rb") as second:
        assert first.read() == second.read()

    (null_path,), _ = evaluation.generate(model, single_scene, [], str(tmp_path / "null"), steps=2)
    assert os.path.basename(null_path) == "story_000.png"


def test_generate_interpolation(tmp_path, evaluation, model, single_scene, pair_scene):
    other = generate_scene(SceneSpec(1, (20,), canvas_size=32, pose_seed=2), 1)
    _, plain = evaluation.generate(model, single_scene, ["one sprite"], str(tmp_path / "a"), steps=1)
    _, start = evaluation.generate(model, single_scene, ["one sprite"], str(tmp_path / "b"), steps=1,
                                   interpolate_with=other, alpha=0.0)
    _, blended = evaluation.generate(model, single_scene, ["one sprite"], str(tmp_path / "c"), steps=1,
                                     interpolate_with=other, alpha=0.5)
    assert start == plain and blended != plain
    with pytest.raises(ValidationError):
        evaluation.generate(model, single_scene, ["one sprite"], str(tmp_path / "d"), steps=1,
                            interpolate_with=pair_scene)


def test_inspect_attn_writes_maps_and_leakage(tmp_path, evaluation, model, pair_scene):
    out_dir = str(tmp_path / "attention")
    result = evaluation.inspect_attn(model, pair_scene, out_dir)
    assert set(result) == {"mid_1x1", "up_2x2", "up_4x4"}
    for layer_id, entry in result.items():
        matrix = np.asarray(entry["matrix"])
        assert matrix.shape == (3, 3)
        assert np.allclose(matrix.sum(axis=0), 1.0, atol=1e-4)
        for k in range(3):
            assert os.path.exists(os.path.join(out_dir, f"{layer_id}_region_{k}.png"))
    with open(os.path.join(out_dir, "leakage.json"), encoding="utf-8") as leakage_file:
        written = json.load(leakage_file)
    assert written["layers"] == result
    assert written["orientation"] == LEAKAGE_ORIENTATION
    assert "column" in written["orientation"]["entry"]
