import os
import sys

import numpy as np
import pytest
import torch
import yaml

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from sprite_story_pkg.checkpoint import read_manifest, save_components  # noqa: E402
from sprite_story_pkg.config import ModelConfig, PretrainConfig  # noqa: E402
from sprite_story_pkg.errors import CheckpointError  # noqa: E402
from sprite_story_pkg.pretraining import BasePretrainer, EncoderPretrainer, load_encoders, load_vae  # noqa: E402
from sprite_story_pkg.synthdata import SceneSpec, generate_scene  # noqa: E402
from sprite_story_pkg.trainer import StoryModel  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_model_config(**overrides) -> ModelConfig:
    """32 pixel canvas, 4x4 latents and narrow layers."""
    values = dict(
        canvas_size=32,
        latent_channels=4,
        face_dim=16,
        encoder_dim=16,
        cond_dim=16,
        num_tokens=2,
        resampler_depth=1,
        resampler_heads=2,
        resampler_head_dim=8,
        unet_width=16,
        attn_heads=2,
        attn_head_dim=8,
        lora_rank=2,
        num_timesteps=100,
        beta_start=1e-3,
        beta_end=0.02,
    )
    values.update(overrides)
    return ModelConfig.from_dict(values)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def story_model(tiny_config) -> StoryModel:
    torch.manual_seed(0)
    return StoryModel(tiny_config).prepare_story_phase()


@pytest.fixture
def single_scene():
    return generate_scene(SceneSpec(1, (3,), canvas_size=32, pose_seed=1), 7)


@pytest.fixture
def pair_scene():
    return generate_scene(SceneSpec(2, (2, 9), canvas_size=32, pose_seed=4, background_id=2), 7)


def write_base_checkpoint(path: str, config: ModelConfig, seed: int = 0) -> str:
    """A base checkpoint from freshly initialised weights."""
    torch.manual_seed(seed)
    model = StoryModel(config)
    model.diffusion.set_null_text(model.encoders.null_text(1).tokens)
    unet_state = dict(model.diffusion.unet.state_dict())
    unet_state["null_text"] = model.diffusion.null_text
    save_components(path, {
        "encoders": model.encoders.state_dict(),
        "vae": model.diffusion.vae.state_dict(),
        "unet": unet_state,
    }, {
        "kind": "base",
        "seed": seed,
        "model_config": config.to_dict(),
        "schedule": model.diffusion.schedule.to_dict(),
    })
    return path


@pytest.fixture
def base_checkpoint(tmp_path, tiny_config) -> str:
    return write_base_checkpoint(str(tmp_path / "base"), tiny_config)


def numeric_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``x``."""
    grad = torch.zeros_like(x)
    flat, grad_flat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        original = float(flat[i])
        flat[i] = original + eps
        plus = float(fn())
        flat[i] = original - eps
        minus = float(fn())
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2 * eps)
    return grad


def assert_gradient_matches(fn, x: torch.Tensor, rtol: float = 1e-4, eps: float = 1e-6) -> None:
    """Compare autograd with central differences in float64."""
    assert x.dtype == torch.float64
    x.grad = None
    fn().backward()
    analytic = x.grad.detach().clone()
    with torch.no_grad():
        numeric = numeric_gradient(fn, x, eps)
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-8)
    error = float((analytic - numeric).abs().max()) / scale
    assert error < rtol, f"relative gradient error {error:.3e}"


def row_stochastic(rows: int, cols: int, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(rows, cols, generator=generator, dtype=torch.float64).softmax(dim=-1)


def random_masks(batch: int, regions: int, size: int, seed: int = 0) -> np.ndarray:
    """Binary masks partitioning each pixel into exactly one region."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, regions, size=(batch, size, size))
    return np.stack([(labels == k) for k in range(regions)], axis=1).astype(np.uint8)


FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


@pytest.fixture(scope="session")
def fixture_spec():
    """Schedule, seed and pinned lower bounds from ``fixtures/fixtures.yml``."""
    with open(os.path.join(FIXTURE_DIR, "fixtures.yml"), encoding="utf-8") as spec_file:
        return yaml.safe_load(spec_file)


def pretrained_fixture(name: str, spec, build):
    """Path and manifest of ``fixtures/<name>``, rebuilt when it was made with other settings."""
    path = os.path.join(FIXTURE_DIR, name)
    config = PretrainConfig.from_dict(spec["pretrain"])
    try:
        manifest = read_manifest(path)
        if manifest.get("pretrain_config") == config.to_dict() and manifest.get("seed") == spec["seed"]:
            return path, manifest
    except CheckpointError:
        pass
    build(path, config, spec["seed"])
    return path, read_manifest(path)


@pytest.fixture(scope="session")
def fixture_encoders(fixture_spec, tmp_path_factory):
    def build(path, config, seed):
        workspace = str(tmp_path_factory.mktemp("fixture_encoders"))
        EncoderPretrainer(workspace, config, ModelConfig()).run(path, seed=seed, progress=False)

    path, manifest = pretrained_fixture("encoders", fixture_spec, build)
    return load_encoders(path), manifest


@pytest.fixture(scope="session")
def fixture_vae(fixture_spec, tmp_path_factory):
    def build(path, config, seed):
        workspace = str(tmp_path_factory.mktemp("fixture_vae"))
        BasePretrainer(workspace, config).run_vae(path, ModelConfig(), seed=seed, progress=False)

    path, manifest = pretrained_fixture("vae", fixture_spec, build)
    return load_vae(path), manifest
