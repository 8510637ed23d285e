"""End-to-end toy training at full desk scale. Run with ``pytest --runslow``."""
import os

import numpy as np
import pytest

from sprite_story_pkg.config import EvalConfig, PretrainConfig, TrainConfig
from sprite_story_pkg.evaluation import Evaluation, diagonal_dominance, leakage_matrix
from sprite_story_pkg.pretraining import BasePretrainer, EncoderPretrainer
from sprite_story_pkg.synthdata import HELDOUT_IDENTITIES, generate_dataset
from sprite_story_pkg.trainer import TrainingManager, iter_reports, load_story_model, loss_decreased

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    workspace = str(root / "ws")
    pretrain = PretrainConfig()
    encoders_dir, _ = EncoderPretrainer(workspace, pretrain).run(str(root / "encoders"), progress=False)
    base_dir, _ = BasePretrainer(workspace, pretrain).run(encoders_dir, str(root / "base"), progress=False)
    manager = TrainingManager(workspace, TrainConfig())
    dataset = generate_dataset(512, seed=0)
    manager.run(dataset, base_dir, str(root / "run"), progress=False)
    return {
        "workspace": workspace,
        "base": base_dir,
        "final": os.path.join(str(root / "run"), "final"),
        "log": os.path.join(str(root / "run"), "train_log.csv"),
    }


@pytest.fixture(scope="module")
def evaluation(trained):
    return Evaluation(trained["workspace"], EvalConfig())


def region_dominance(evaluation, model, scenes):
    values = []
    for scene in scenes:
        records = evaluation._region_maps(model, scene, [scene], seed=0)
        finest = max(records, key=lambda r: r.A.shape[-1])
        values.append(diagonal_dominance(leakage_matrix(finest.A[0], scene.masks)))
    return float(np.mean(values))


def test_total_loss_decreases(trained):
    totals = [row["total"] for row in iter_reports(trained["log"])]
    assert len(totals) == TrainConfig().total_steps
    assert loss_decreased(totals, window=100)


def test_attention_iou_improves_over_init(trained, evaluation):
    initial = evaluation.evaluate(evaluation.load(trained["base"]), baseline=False)
    final = evaluation.evaluate(evaluation.load(trained["final"]), baseline=False)
    assert final.attn_iou >= 1.5 * initial.attn_iou


def test_identity_beats_the_unconditioned_baseline(trained, evaluation):
    report = evaluation.evaluate(evaluation.load(trained["final"]))
    assert report.face_sim > report.baseline_face_sim
    assert report.char_sim > report.baseline_char_sim


def test_leakage_diagonal_grows_on_pairs(trained, evaluation):
    pairs = list(generate_dataset(16, mix=0.0, seed=5, identity_pool=HELDOUT_IDENTITIES))
    before = region_dominance(evaluation, evaluation.load(trained["base"]), pairs)
    after = region_dominance(evaluation, evaluation.load(trained["final"]), pairs)
    assert after > before


def test_mode_contracts(tmp_path, trained, evaluation):
    model, _, _ = load_story_model(trained["final"])
    model.eval()
    default = evaluation.evaluate(model)
    zeroed = evaluation.evaluate(model, zero_character=True)
    assert zeroed.char_sim < default.char_sim
    assert zeroed.face_sim > default.baseline_face_sim

    no_pose = evaluation.evaluate(model, use_pose=False, baseline=False)
    assert np.isfinite(no_pose.face_sim)

    reference = generate_dataset(1, mix=1.0, seed=9, identity_pool=HELDOUT_IDENTITIES)[0]
    other = generate_dataset(1, mix=1.0, seed=10, identity_pool=HELDOUT_IDENTITIES)[0]
    _, plain = evaluation.generate(model, reference, ["one sprite"], str(tmp_path / "a"), steps=2)
    _, start = evaluation.generate(model, reference, ["one sprite"], str(tmp_path / "b"), steps=2,
                                   interpolate_with=other, alpha=0.0)
    _, end = evaluation.generate(model, reference, ["one sprite"], str(tmp_path / "c"), steps=2,
                                 interpolate_with=other, alpha=1.0)
    _, other_plain = evaluation.generate(model, other, ["one sprite"], str(tmp_path / "d"), steps=2)
    assert start == plain and end == other_plain
