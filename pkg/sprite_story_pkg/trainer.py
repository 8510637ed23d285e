"""Story training: conditioning dropout, two-phase learning rate, frozen/trainable split, checkpoints.

Only the resampler stack, the image-prompt key/value projections, every LoRA delta
and the pose branch are handed to the optimizer. Training is deterministic: batch
indices for step ``s`` come from ``numpy.random.default_rng([seed, s])`` and every
other random draw (reference poses, dropout, timesteps, noise) comes from one
``torch.Generator`` whose state is saved with each checkpoint.
"""
import os
import csv
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .backbone import LatentDiffusion, add_noise
from .checkpoint import load_components, load_module_state, save_components, state_checksum, tensor_digest
from .config import ModelConfig, TrainConfig
from .encoders import FaceEmbedding, FeatureSequence, ToyEncoders
from .errors import CheckpointError, NumericFailure, SpriteStoryError, ValidationError
from .losses import LossReport, attention_loss, composite_loss, diffusion_loss
from .ppr import ConditioningBundle, PositionalPerceiverResampler
from .synthdata import CharacterReference, Scene, SceneDataset, load_dataset, perturb_pose
from .workspace import WorkspaceManager

CSV_FIELDS = ("step", "lr", "l_sd", "l_attn_mean", "total")


class StoryModel(nn.Module):
    """Frozen encoders, the latent diffusion backbone and the positional resampler."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoders = ToyEncoders(self.config).freeze()
        self.diffusion = LatentDiffusion(self.config)
        self.ppr = PositionalPerceiverResampler(self.config)

    @property
    def device(self) -> torch.device:
        return self.diffusion.null_text.device

    def prepare_story_phase(self, init_image_branch: bool = True) -> "StoryModel":
        """Attach the pose branch, seed the image K/V from the text K/V and set the null caption."""
        self.diffusion.attach_pose_branch()
        if init_image_branch:
            for block in self.diffusion.unet.transformer_blocks():
                block.cross_attn.init_image_branch_from_text()
        self.diffusion.set_null_text(self.encoders.null_text(1).tokens)
        return self

    def text_context(self, captions: Sequence) -> torch.Tensor:
        return self.encoders.encode_text(captions).tokens

    def reference_features(
        self, slots: Sequence[Sequence[CharacterReference]]
    ) -> List[Tuple[FaceEmbedding, FeatureSequence]]:
        """Encode per-slot references; ``slots[k]`` holds slot ``k`` of every sample."""
        return [
            (
                self.encoders.encode_face(np.stack([c.face_crop for c in characters])),
                self.encoders.encode_character(np.stack([c.body_crop for c in characters])),
            )
            for characters in slots
        ]

    def conditioning(self, reference_scenes: Sequence[Scene], zero_character=False) -> ConditioningBundle:
        """Bundle for a batch of reference scenes that all hold the same number of characters."""
        counts = {scene.num_characters for scene in reference_scenes}
        if len(counts) != 1:
            raise ValidationError(f"Reference scenes mix character counts {sorted(counts)}")
        (count,) = counts
        slots = [[scene.characters[k] for scene in reference_scenes] for k in range(count)]
        return self.ppr.build_conditioning(self.reference_features(slots), zero_character=zero_character)

    @classmethod
    def from_base(cls, path: str, config: Optional[ModelConfig] = None) -> "StoryModel":
        """Start story training from a base checkpoint (encoders, VAE, text-only U-Net)."""
        manifest, components = load_components(path)
        if manifest.get("kind") != "base":
            raise CheckpointError(f"{path} is a '{manifest.get('kind')}' checkpoint, expected 'base'")
        model = cls(config or ModelConfig.from_dict(manifest["model_config"]))
        load_base_components(model, components)
        return model.prepare_story_phase()


def load_base_components(model: StoryModel, components: Dict[str, Dict[str, torch.Tensor]]) -> None:
    for name in ("encoders", "vae", "unet"):
        if name not in components:
            raise CheckpointError(f"Checkpoint lacks the '{name}' component")
    load_module_state(model.encoders, components["encoders"], "encoders")
    model.encoders.freeze()
    load_module_state(model.diffusion.vae, components["vae"], "vae")
    unet_state = dict(components["unet"])
    null_text = unet_state.pop("null_text", None)
    load_module_state(model.diffusion.unet, unet_state, "unet")
    if null_text is not None:
        model.diffusion.set_null_text(null_text)


def is_trainable_name(name: str) -> bool:
    """Membership rule of the story-training trainable set."""
    return (
        name.startswith("ppr.")
        or name.startswith("diffusion.pose_branch.")
        or ".lora." in name
        or name.endswith("cross_attn.to_k_i.base.weight")
        or name.endswith("cross_attn.to_v_i.base.weight")
    )


def trainable_parameters(model: StoryModel) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if is_trainable_name(name)]


def configure_trainable(model: StoryModel) -> List[Tuple[str, nn.Parameter]]:
    """Freeze everything outside the trainable set and return the set in a fixed order."""
    for name, parameter in model.named_parameters():
        parameter.requires_grad_(is_trainable_name(name))
    model.encoders.freeze()
    return trainable_parameters(model)


def assert_trainable_set(model: StoryModel, optimizer: torch.optim.Optimizer) -> None:
    expected = {id(p) for _, p in trainable_parameters(model)}
    handed = {id(p) for group in optimizer.param_groups for p in group["params"]}
    if expected != handed:
        raise ValidationError(
            f"Optimizer holds {len(handed)} parameters but the trainable set has {len(expected)}"
        )
    stray = [name for name, p in model.named_parameters() if p.requires_grad and id(p) not in expected]
    if stray:
        raise ValidationError(f"Parameters outside the trainable set require grad: {stray[:3]}")


def frozen_checksums(model: StoryModel) -> Dict[str, str]:
    """Checksums of the parts story training must never touch."""
    unet_state = model.diffusion.unet.state_dict()
    frozen_unet = {k: v for k, v in unet_state.items() if not is_trainable_name(f"diffusion.unet.{k}")}
    return {
        "encoders": state_checksum(model.encoders),
        "vae": state_checksum(model.diffusion.vae),
        "unet_frozen": tensor_digest(frozen_unet),
    }


@dataclass
class TrainState:
    step: int
    model: StoryModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    config: TrainConfig


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-constant two-phase learning rate."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    return config.lr_phase1 if step < config.phase_boundary else config.lr_phase2


def make_optimizer(model: StoryModel, config: TrainConfig) -> torch.optim.Optimizer:
    parameters = [p for _, p in configure_trainable(model)]
    return torch.optim.AdamW(
        parameters, lr=lr_at(0, config), betas=tuple(config.betas), weight_decay=config.weight_decay
    )


def create_train_state(model: StoryModel, config: TrainConfig) -> TrainState:
    optimizer = make_optimizer(model, config)
    assert_trainable_set(model, optimizer)
    return TrainState(0, model, optimizer, torch.Generator().manual_seed(config.seed), config)


def batch_indices(dataset_size: int, batch_size: int, seed: int, step: int) -> List[int]:
    rng = np.random.default_rng([seed, step])
    return [int(i) for i in rng.choice(dataset_size, size=batch_size, replace=dataset_size < batch_size)]


def _group_by_characters(batch: Sequence[Scene]) -> List[List[Scene]]:
    groups: Dict[int, List[Scene]] = {}
    for scene in batch:
        groups.setdefault(scene.num_characters, []).append(scene)
    return [groups[n] for n in sorted(groups)]


def _group_losses(state: TrainState, scenes: List[Scene]) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    model, config, generator = state.model, state.config, state.generator
    device = model.device
    size = len(scenes)

    perturb_seeds = torch.randint(0, 2**31 - 1, (size,), generator=generator).tolist()
    drop_caption = torch.rand(size, generator=generator) < config.caption_drop_prob
    drop_character = torch.rand(size, generator=generator) < config.character_drop_prob
    timesteps = torch.randint(0, model.diffusion.schedule.num_timesteps, (size,), generator=generator)

    if config.reference_pose_perturbation:
        references = [perturb_pose(scene, seed) for scene, seed in zip(scenes, perturb_seeds)]
    else:
        references = list(scenes)
    captions = [[] if drop else scene.caption for scene, drop in zip(scenes, drop_caption.tolist())]

    images = torch.from_numpy(np.stack([scene.image for scene in scenes])).permute(0, 3, 1, 2).to(device)
    masks = torch.from_numpy(np.stack([scene.masks for scene in scenes])).to(device)
    poses = torch.from_numpy(np.stack([scene.pose_map for scene in scenes])).to(device)

    c_t = model.text_context(captions)
    bundle = model.conditioning(references, zero_character=drop_character.to(device))
    with torch.no_grad():
        z0 = model.diffusion.vae.encode_image(images)
    eps = torch.randn(z0.shape, generator=generator).to(device=device, dtype=z0.dtype)
    z_t = add_noise(model.diffusion.schedule, z0, timesteps, eps)

    eps_hat, records = model.diffusion.predict_noise_with_records(
        z_t, timesteps.to(device), c_t, bundle, pose=poses, record=True, gamma=config.gamma
    )
    selected = set(config.attn_loss_layers) if config.attn_loss_layers else None
    l_attn = {r.layer_id: attention_loss(r, masks) for r in records if selected is None or r.layer_id in selected}
    if not l_attn:
        raise ValidationError(f"attn_loss_layers {config.attn_loss_layers} select none of the recorded layers")
    return diffusion_loss(eps, eps_hat), l_attn


def train_step(state: TrainState, batch: Sequence[Scene], config: Optional[TrainConfig] = None) -> Tuple[TrainState, LossReport]:
    """One optimizer step on ``batch``; mixed character counts are split into groups.

    Group losses are combined weighted by group size.
    """
    if not batch:
        raise ValidationError("train_step needs a non-empty batch")
    if config is not None:
        state.config = config
    config = state.config
    total = len(batch)

    l_sd = 0.0
    l_attn: Dict[str, torch.Tensor] = {}
    for scenes in _group_by_characters(batch):
        weight = len(scenes) / total
        group_sd, group_attn = _group_losses(state, scenes)
        l_sd = l_sd + weight * group_sd
        for layer_id, value in group_attn.items():
            l_attn[layer_id] = l_attn.get(layer_id, 0.0) + weight * value

    report = composite_loss(l_sd, l_attn, config.lambda_attn)

    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    report.objective.backward()
    state.optimizer.step()
    state.step += 1
    return state, report


def _optimizer_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {}
    for name, parameter in trainable_parameters(state.model):
        moments = state.optimizer.state.get(parameter)
        if not moments:
            continue
        tensors[f"{name}::exp_avg"] = moments["exp_avg"]
        tensors[f"{name}::exp_avg_sq"] = moments["exp_avg_sq"]
        tensors[f"{name}::step"] = torch.as_tensor(moments["step"], dtype=torch.float32).reshape(1)
    return tensors


def save_checkpoint(state: TrainState, path: str) -> str:
    """Write every component, the optimizer moments and the generator state."""
    model = state.model
    unet_state = dict(model.diffusion.unet.state_dict())
    unet_state["null_text"] = model.diffusion.null_text
    components = {
        "encoders": model.encoders.state_dict(),
        "vae": model.diffusion.vae.state_dict(),
        "unet": unet_state,
        "ppr": model.ppr.state_dict(),
        "pose_branch": model.diffusion.pose_branch.state_dict(),
        "optimizer": _optimizer_tensors(state),
        "rng": {"generator_state": state.generator.get_state(), "step": torch.tensor([state.step])},
    }
    save_components(path, components, {
        "kind": "story",
        "step": state.step,
        "model_config": model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "schedule": model.diffusion.schedule.to_dict(),
    })
    return path


def load_story_model(path: str, device: Optional[str] = None) -> Tuple[StoryModel, Dict, Dict]:
    """Load a ``story`` checkpoint, or a ``base`` one with a freshly initialised resampler."""
    manifest, components = load_components(path)
    kind = manifest.get("kind")
    if kind not in ("story", "base"):
        raise CheckpointError(f"{path} is a '{kind}' checkpoint, expected 'story' or 'base'")
    model = StoryModel(ModelConfig.from_dict(manifest["model_config"]))
    load_base_components(model, components)
    model.prepare_story_phase(init_image_branch=(kind == "base"))
    if kind == "story":
        load_module_state(model.ppr, components["ppr"], "ppr")
        load_module_state(model.diffusion.pose_branch, components["pose_branch"], "pose_branch")
    if device is not None:
        model.to(device)
    return model, manifest, components


def load_checkpoint(path: str, device: Optional[str] = None) -> TrainState:
    """Rebuild the exact training state saved by :func:`save_checkpoint`."""
    model, manifest, components = load_story_model(path, device)
    if manifest["kind"] != "story":
        raise CheckpointError(f"{path} holds no training state")
    config = TrainConfig.from_dict(manifest["train_config"])
    state = create_train_state(model, config)

    moments = components["optimizer"]
    for name, parameter in trainable_parameters(model):
        key = f"{name}::exp_avg"
        if key not in moments:
            continue
        for suffix in ("exp_avg_sq", "step"):
            if f"{name}::{suffix}" not in moments:
                raise CheckpointError(f"Tensor 'optimizer/{name}::{suffix}' missing")
        state.optimizer.state[parameter] = {
            "step": moments[f"{name}::step"].reshape(()).clone(),
            "exp_avg": moments[key].to(parameter.device).clone(),
            "exp_avg_sq": moments[f"{name}::exp_avg_sq"].to(parameter.device).clone(),
        }

    rng = components["rng"]
    if "generator_state" not in rng:
        raise CheckpointError("Tensor 'rng/generator_state' missing")
    state.generator.set_state(rng["generator_state"])
    state.step = int(rng["step"][0])
    return state


class TrainingManager(WorkspaceManager):
    """Runs story training inside a workspace, logging to ``logs/trainer.log``."""

    def __init__(self, workspace_path: Optional[str] = None, train_config: Optional[TrainConfig] = None):
        super().__init__(workspace_path, component="Trainer")
        self.train_config = train_config or self.load_train_config()
        self.report_settings("Trainer initialised with following settings:", {
            "workspace": self.workspace_path,
            "total_steps": self.train_config.total_steps,
            "batch_size": self.train_config.batch_size,
            "lambda": self.train_config.lambda_attn,
            "lr": f"{self.train_config.lr_phase1} -> {self.train_config.lr_phase2} at {self.train_config.phase_boundary}",
            "seed": self.train_config.seed,
        })

    def _open_log(self, out_dir: str, resume_step: Optional[int] = None):
        """Open ``train_log.csv``; on resume, rows from ``resume_step`` on are dropped first."""
        log_path = os.path.join(out_dir, "train_log.csv")
        kept: List[Dict[str, str]] = []
        if resume_step is not None and os.path.exists(log_path):
            with open(log_path, newline="", encoding="utf-8") as old_log:
                rows = list(csv.DictReader(old_log))
            kept = [row for row in rows if int(float(row["step"])) < resume_step]
            if len(kept) < len(rows):
                self.logger.info(f"Dropped {len(rows) - len(kept)} log rows at or after step {resume_step}")
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(log_file, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(kept)
        return log_file, writer

    def run(
        self,
        dataset: Optional[SceneDataset] = None,
        base_checkpoint: Optional[str] = None,
        out_dir: Optional[str] = None,
        resume: Optional[str] = None,
        device: Optional[str] = None,
        progress: bool = True,
    ) -> Tuple[TrainState, List[LossReport]]:
        """Train until ``total_steps``; returns the final state and this run's loss reports."""
        config = self.train_config
        out_dir = out_dir or self.path_for("checkpoints")
        os.makedirs(out_dir, exist_ok=True)
        dataset = dataset if dataset is not None else load_dataset(self.path_for("data"))
        if len(dataset) == 0:
            raise ValidationError("Training dataset is empty")

        if resume:
            state = load_checkpoint(resume, device)
            state.config = config
            self.logger.info(f"Resuming from {resume} at step {state.step}")
        else:
            base_checkpoint = base_checkpoint or self.path_for("base")
            model = StoryModel.from_base(base_checkpoint)
            if device is not None:
                model.to(device)
            state = create_train_state(model, config)
            self.logger.info(f"Starting story training from base checkpoint {base_checkpoint}")
        assert_trainable_set(state.model, state.optimizer)
        checksums = frozen_checksums(state.model)
        self.logger.info(f"Trainable parameters: {sum(p.numel() for _, p in trainable_parameters(state.model))}")

        reports: List[LossReport] = []
        log_file, writer = self._open_log(out_dir, state.step if resume else None)
        try:
            steps = range(state.step, config.total_steps)
            for step in tqdm(steps, desc="train", disable=not progress):
                batch = [dataset[i] for i in batch_indices(len(dataset), config.batch_size, config.seed, step)]
                lr = lr_at(step, config)
                try:
                    state, report = train_step(state, batch)
                except NumericFailure as e:
                    self.logger.error(f"Numeric failure at step {step}: {e}")
                    raise
                reports.append(report)
                writer.writerow(report.as_row(step, lr))
                if step % config.log_interval == 0:
                    log_file.flush()
                    self.logger.info(
                        f"step {step}: lr={lr:g} l_sd={report.l_sd:.5f} "
                        f"l_attn_mean={report.l_attn_mean:.5f} total={report.total:.5f}"
                    )
                if state.step % config.checkpoint_interval == 0 and state.step < config.total_steps:
                    save_checkpoint(state, os.path.join(out_dir, f"step_{state.step:06d}"))
        finally:
            log_file.close()

        final_path = save_checkpoint(state, os.path.join(out_dir, "final"))
        if frozen_checksums(state.model) != checksums:
            raise SpriteStoryError("Frozen parameters changed during story training")
        self.logger.info(f"Training finished at step {state.step}; checkpoint written to {final_path}")
        return state, reports


def iter_reports(path: str) -> Iterable[Dict[str, float]]:
    """Read a training CSV log back as dictionaries of floats."""
    with open(path, newline="", encoding="utf-8") as log_file:
        for row in csv.DictReader(log_file):
            yield {key: float(value) for key, value in row.items()}


def loss_decreased(totals: Sequence[float], window: int = 100) -> bool:
    """Median of the last ``window`` totals is below the median of the first ``window``."""
    if len(totals) < 2 * window:
        window = max(1, len(totals) // 2)
    return float(np.median(totals[-window:])) < float(np.median(totals[:window]))
