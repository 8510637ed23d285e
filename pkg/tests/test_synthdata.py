import json
import os

import numpy as np
import pytest

from sprite_story_pkg.errors import CheckpointError, ValidationError
from sprite_story_pkg.synthdata import (
    HELDOUT_IDENTITIES,
    SCENE_CACHE_SIZE,
    TRAIN_IDENTITIES,
    SceneSpec,
    _generate_scene_cached,
    decode_caption,
    encode_caption,
    generate_dataset,
    generate_scene,
    load_dataset,
    perturb_pose,
    save_dataset,
    scenes_equal,
)


@pytest.mark.parametrize("num_characters,identities", [(1, (4,)), (2, (4, 11))])
def test_masks_partition_every_pixel(num_characters, identities):
    scene = generate_scene(SceneSpec(num_characters, identities), 7)
    assert scene.masks.shape == (num_characters + 1, 64, 64)
    assert set(np.unique(scene.masks)) <= {0, 1}
    assert np.array_equal(scene.masks.sum(axis=0), np.ones((64, 64)))
    assert len(scene.characters) == num_characters


def test_scene_arrays_and_crops():
    scene = generate_scene(SceneSpec(2, (1, 5)), 3)
    assert scene.image.shape == (64, 64, 3) and scene.image.dtype == np.float32
    assert scene.keypoints.shape == (2, 7, 2)
    assert scene.pose_map.shape == (7, 64, 64)
    for character in scene.characters:
        assert character.face_crop.shape == (16, 16, 3)
        assert character.body_crop.shape == (32, 32, 3)
        assert character.body_crop.max() > 0
    assert not scene.image.flags.writeable


def test_same_spec_and_seed_is_bit_identical():
    spec = SceneSpec(2, (0, 7), pose_seed=12, background_id=5, caption_template_id=2)
    first = generate_scene(spec, 99)
    second = generate_scene(SceneSpec(2, (0, 7), pose_seed=12, background_id=5, caption_template_id=2), 99)
    assert scenes_equal(first, second)


def test_invalid_specs_are_rejected():
    with pytest.raises(ValidationError, match="three or more"):
        generate_scene(SceneSpec(3, (0, 1, 2)), 0)
    with pytest.raises(ValidationError):
        generate_scene(SceneSpec(1, (24,)), 0)
    with pytest.raises(ValidationError):
        generate_scene(SceneSpec(1, (0,), canvas_size=36), 0)


def test_dataset_mix_counts():
    dataset = generate_dataset(10, mix=0.6, seed=1)
    counts = [spec.num_characters for spec in dataset.specs()]
    assert counts.count(1) == 6 and counts.count(2) == 4

    only = generate_dataset(1, mix=1.0, seed=1)
    assert only.specs()[0].num_characters == 1


def test_dataset_is_reproducible_and_partitioned():
    a = generate_dataset(100, seed=5)
    b = generate_dataset(100, seed=5)
    assert a.identity_sequence() == b.identity_sequence()
    assert all(i in TRAIN_IDENTITIES for ids in a.identity_sequence() for i in ids)

    heldout = generate_dataset(20, seed=5, identity_pool=HELDOUT_IDENTITIES)
    assert all(i in HELDOUT_IDENTITIES for ids in heldout.identity_sequence() for i in ids)


def test_dataset_argument_errors():
    with pytest.raises(ValidationError):
        generate_dataset(0)
    with pytest.raises(ValidationError):
        generate_dataset(5, mix=1.5)


def test_perturb_pose_keeps_identity_and_partition():
    scene = generate_scene(SceneSpec(1, (3,), pose_seed=1), 11)
    moved = perturb_pose(scene, 1234)
    assert moved.characters[0].identity_id == 3
    assert moved.characters[0].clothing_id == scene.characters[0].clothing_id
    assert not np.array_equal(moved.keypoints, scene.keypoints)
    assert np.array_equal(moved.masks.sum(axis=0), np.ones((64, 64)))


def test_perturb_pose_with_own_seed_is_a_fixed_point():
    scene = generate_scene(SceneSpec(2, (3, 8), pose_seed=42), 11)
    assert scenes_equal(perturb_pose(scene, 42), scene)


def test_perturbed_scenes_stay_out_of_the_scene_cache():
    scene = generate_scene(SceneSpec(1, (5,), pose_seed=2), 3)
    before = _generate_scene_cached.cache_info().currsize
    for seed in range(300):
        perturb_pose(scene, 10_000 + seed)
    assert _generate_scene_cached.cache_info().currsize == before
    assert _generate_scene_cached.cache_info().maxsize == SCENE_CACHE_SIZE


def test_caption_vocabulary():
    ids = encode_caption("a red sprite in the meadow")
    assert decode_caption(ids) == "a red sprite in the meadow"
    assert len(encode_caption([])) == 0
    with pytest.raises(ValidationError, match="vocabulary"):
        encode_caption("a purple dragon")
    with pytest.raises(ValidationError):
        encode_caption(["a"] * 9)


def test_scene_captions_decode_to_known_words():
    scene = generate_scene(SceneSpec(2, (1, 2), caption_template_id=3), 0)
    words = decode_caption(scene.caption).split()
    assert 0 < len(words) <= 8
    assert np.array_equal(encode_caption(words), scene.caption)


def test_save_and_load_dataset(tmp_path):
    dataset = generate_dataset(4, seed=2, canvas_size=32)
    path = save_dataset(dataset, str(tmp_path / "data"))
    loaded = load_dataset(path)
    assert len(loaded) == 4 and loaded.mix == dataset.mix
    for original, restored in zip(dataset, loaded):
        assert scenes_equal(original, restored)

    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as manifest_file:
        manifest = json.load(manifest_file)
    assert manifest["count"] == 4


def test_load_dataset_names_missing_scene(tmp_path):
    path = save_dataset(generate_dataset(2, seed=2, canvas_size=32), str(tmp_path / "data"))
    os.remove(os.path.join(path, "scenes", "scene_00001.safetensors"))
    with pytest.raises(CheckpointError, match="scene_00001"):
        load_dataset(path)[1]
