"""Typed configuration for models, pretraining, story training and evaluation.

Every config is a dataclass that round-trips through plain dictionaries so it can
be stored in YAML files and checkpoint manifests. JSON files load through the same
YAML reader.
"""
import os
import hashlib
import json
from dataclasses import dataclass, fields, asdict
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import yaml

from .errors import ValidationError

C = TypeVar("C", bound="_ConfigBase")


class _ConfigBase:
    """Dictionary and YAML plumbing shared by all config dataclasses."""

    @classmethod
    def from_dict(cls: Type[C], values: Optional[Dict[str, Any]]) -> C:
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValidationError(f"Unknown {cls.__name__} keys: {unknown}")
        for name in ("betas",):
            if name in values and isinstance(values[name], list):
                values[name] = tuple(values[name])
        config = cls(**values)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        for key, value in values.items():
            if isinstance(value, tuple):
                values[key] = list(value)
        return values

    def validate(self) -> None:
        pass

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def load(cls: Type[C], path: str, section: Optional[str] = None) -> C:
        """Load a config from a YAML (or JSON) file, optionally from one section."""
        if not os.path.exists(path):
            raise ValidationError(f"Config file not found at {path}")
        try:
            with open(path, "r", encoding="utf-8") as config_file:
                values = yaml.safe_load(config_file) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"Failed to parse config file {path}: {e}") from e
        if section is not None:
            values = values.get(section, {}) or {}
        return cls.from_dict(values)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as config_file:
            yaml.safe_dump(self.to_dict(), config_file, default_flow_style=False, sort_keys=True)


@dataclass
class ModelConfig(_ConfigBase):
    """Architecture sizes shared by every component."""

    canvas_size: int = 64
    latent_factor: int = 8
    latent_channels: int = 4
    face_crop_size: int = 16
    body_crop_size: int = 32
    patch_size: int = 8
    face_dim: int = 64
    encoder_dim: int = 64
    cond_dim: int = 64
    num_tokens: int = 4
    max_characters: int = 2
    resampler_depth: int = 2
    resampler_heads: int = 4
    resampler_head_dim: int = 16
    resampler_ff_mult: int = 2
    fuse_hidden_mult: int = 2
    unet_width: int = 64
    attn_heads: int = 4
    attn_head_dim: int = 16
    lora_rank: int = 4
    lora_self_attention: bool = True
    vocab_size: int = 64
    max_caption_len: int = 8
    pose_channels: int = 7
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.canvas_size % self.latent_factor != 0:
            raise ValidationError(
                f"canvas_size {self.canvas_size} must be divisible by latent_factor {self.latent_factor}"
            )
        if (self.canvas_size // self.latent_factor) % 4 != 0:
            raise ValidationError("latent size must be divisible by 4 for the two U-Net downsamplings")
        if self.body_crop_size % self.patch_size != 0:
            raise ValidationError("body_crop_size must be divisible by patch_size")
        if self.unet_width % 8 != 0:
            raise ValidationError("unet_width must be divisible by 8 (group norm)")
        if self.lora_rank < 1:
            raise ValidationError("lora_rank must be >= 1")
        if self.max_characters < 1:
            raise ValidationError("max_characters must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValidationError("betas must satisfy 0 < beta_start <= beta_end < 1")

    @property
    def latent_size(self) -> int:
        return self.canvas_size // self.latent_factor

    @property
    def char_tokens(self) -> int:
        return (self.body_crop_size // self.patch_size) ** 2


@dataclass
class TrainConfig(_ConfigBase):
    """Story-training regimen: two-phase learning rate, conditioning dropout, checkpoints."""

    total_steps: int = 4000
    batch_size: int = 16
    lr_phase1: float = 1e-4
    lr_phase2: float = 5e-5
    phase_boundary: int = 2000
    lambda_attn: float = 0.1
    caption_drop_prob: float = 0.10
    character_drop_prob: float = 0.05
    seed: int = 0
    checkpoint_interval: int = 500
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    gamma: float = 1.0
    log_interval: int = 50
    attn_loss_layers: Optional[List[str]] = None
    reference_pose_perturbation: bool = True

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= self.phase_boundary <= self.total_steps:
            raise ValidationError(
                f"phase_boundary {self.phase_boundary} must lie in [0, total_steps={self.total_steps}]"
            )
        for name in ("caption_drop_prob", "character_drop_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.lambda_attn < 0:
            raise ValidationError("lambda_attn must be >= 0")
        if self.checkpoint_interval < 1:
            raise ValidationError("checkpoint_interval must be >= 1")
        if len(self.betas) != 2:
            raise ValidationError("betas must hold two values")


@dataclass
class PretrainConfig(_ConfigBase):
    """Schedules for the frozen toy encoders, the VAE and the text-only base U-Net."""

    seed: int = 0
    encoder_steps: int = 600
    encoder_batch_size: int = 64
    encoder_lr: float = 2e-3
    vae_steps: int = 1500
    vae_batch_size: int = 32
    vae_lr: float = 1e-3
    vae_kl_weight: float = 1e-4
    base_steps: int = 3000
    base_batch_size: int = 32
    base_lr: float = 2e-4
    dataset_size: int = 512
    log_interval: int = 100

    def validate(self) -> None:
        for name in ("encoder_steps", "vae_steps", "base_steps", "dataset_size"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class EvalConfig(_ConfigBase):
    """Evaluation protocol: held-out references, prompts and sampler settings."""

    seed: int = 0
    num_references: int = 8
    prompts_per_ref: int = 4
    images_per_prompt: int = 1
    steps: int = 25
    guidance: float = 7.5
    gamma: float = 1.0
    iou_threshold: float = 0.5
    record_timestep: int = 500
    single_character_only: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValidationError("iou_threshold must lie in (0, 1)")
