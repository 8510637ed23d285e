"""Pretraining of the frozen toy encoders, the VAE and the text-only base U-Net.

``EncoderPretrainer`` fits the face encoder to identities, the character encoder to
clothing and aligns the scene tower with the text encoder. ``BasePretrainer`` fits
the VAE and then a text-conditioned U-Net whose image branch stays unused. Both
write checkpoint directories in the format of :mod:`sprite_story_pkg.checkpoint`.
"""
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .backbone import LatentDiffusion, ToyVAE, add_noise
from .checkpoint import load_components, load_module_state, save_components
from .config import ModelConfig, PretrainConfig
from .encoders import PAD_ID, FeatureSequence, ToyEncoders, images_to_tensor
from .errors import CheckpointError
from .losses import diffusion_loss
from .synthdata import (
    CLOTHING_PALETTE_SIZE,
    IDENTITY_PALETTE_SIZE,
    TRAIN_IDENTITIES,
    Scene,
    SceneDataset,
    SceneSpec,
    generate_dataset,
    generate_scene,
)
from .workspace import WorkspaceManager


class CosineClassifier(nn.Module):
    """Scaled cosine logits over unit-norm embeddings."""

    def __init__(self, dim: int, classes: int, scale: float = 16.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(classes, dim) * dim ** -0.5)
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * F.normalize(x, dim=-1) @ F.normalize(self.weight, dim=-1).t()


def sample_batch(dataset: SceneDataset, batch_size: int, seed: int, step: int) -> List[Scene]:
    rng = np.random.default_rng([seed, step])
    indices = rng.choice(len(dataset), size=batch_size, replace=len(dataset) < batch_size)
    return [dataset[int(i)] for i in indices]


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    mse = float(F.mse_loss(x, y))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _margin(similarity: torch.Tensor, closer: torch.Tensor, further: torch.Tensor) -> float:
    return float(similarity[closer].mean() - similarity[further].mean())


def identity_margin(encoders: ToyEncoders, identities: Sequence[int], views: int = 4, seed: int = 0) -> float:
    """Mean intra-identity minus mean inter-identity face cosine similarity."""
    crops, labels = [], []
    for identity in identities:
        for view in range(views):
            spec = SceneSpec(1, (identity,), pose_seed=seed * 1000 + view, background_id=view % 8)
            crops.append(generate_scene(spec, seed + view).characters[0].face_crop)
            labels.append(identity)
    vectors = encoders.encode_face(np.stack(crops)).vector
    similarity = vectors @ vectors.t()
    labels_t = torch.as_tensor(labels)
    same = labels_t[:, None] == labels_t[None, :]
    off_diagonal = ~torch.eye(len(labels), dtype=torch.bool)
    return _margin(similarity, same & off_diagonal, ~same)


def clothing_margin(encoders: ToyEncoders, identities: Sequence[int], views: int = 2, seed: int = 0) -> float:
    """Character-token mean cosine of shared clothing across identities minus that of different clothing.

    Only pairs of different identities enter either mean.
    """
    crops, identity_labels, clothing_labels = [], [], []
    for identity in identities:
        for clothing in range(CLOTHING_PALETTE_SIZE):
            for view in range(views):
                spec = SceneSpec(1, (identity,), pose_seed=seed * 1000 + view, background_id=(clothing + view) % 8,
                                 clothing_ids=(clothing,))
                crops.append(generate_scene(spec, seed + view).characters[0].body_crop)
                identity_labels.append(identity)
                clothing_labels.append(clothing)
    vectors = F.normalize(encoders.encode_character(np.stack(crops)).tokens.mean(dim=1), dim=-1)
    similarity = vectors @ vectors.t()
    identity_t, clothing_t = torch.as_tensor(identity_labels), torch.as_tensor(clothing_labels)
    other_identity = identity_t[:, None] != identity_t[None, :]
    same_clothing = clothing_t[:, None] == clothing_t[None, :]
    return _margin(similarity, same_clothing & other_identity, ~same_clothing & other_identity)


@torch.no_grad()
def reconstruction_psnr(vae: ToyVAE, scenes: Sequence[Scene]) -> float:
    """PSNR of decode(encode(x)) over ``scenes``, in dB."""
    device = vae.latent_scale.device
    images = images_to_tensor(np.stack([s.image for s in scenes]), device)
    return psnr(vae.decode_latent(vae.encode_image(images)).clamp(0, 1), images)


class EncoderPretrainer(WorkspaceManager):
    """Pretrains and freezes the toy encoders."""

    def __init__(
        self,
        workspace_path: Optional[str] = None,
        pretrain_config: Optional[PretrainConfig] = None,
        model_config: Optional[ModelConfig] = None,
    ):
        super().__init__(workspace_path, component="EncoderPretrainer")
        self.pretrain_config = pretrain_config or self.load_pretrain_config()
        self.model_config = model_config or self.load_model_config()
        self.report_settings("EncoderPretrainer initialised with following settings:", {
            "steps": self.pretrain_config.encoder_steps,
            "batch_size": self.pretrain_config.encoder_batch_size,
            "lr": self.pretrain_config.encoder_lr,
            "seed": self.pretrain_config.seed,
        })

    def train(self, seed: Optional[int] = None, device: Optional[str] = None, progress: bool = True) -> ToyEncoders:
        config = self.pretrain_config
        seed = config.seed if seed is None else seed
        torch.manual_seed(seed)
        encoders = ToyEncoders(self.model_config).to(device or "cpu")
        face_head = CosineClassifier(self.model_config.face_dim, IDENTITY_PALETTE_SIZE).to(encoders.device)
        clothing_head = nn.Linear(self.model_config.encoder_dim, CLOTHING_PALETTE_SIZE).to(encoders.device)
        parameters = list(encoders.parameters()) + list(face_head.parameters()) + list(clothing_head.parameters())
        optimizer = torch.optim.Adam(parameters, lr=config.encoder_lr)
        dataset = generate_dataset(
            config.dataset_size, mix=0.6, seed=seed, identity_pool=range(IDENTITY_PALETTE_SIZE),
            canvas_size=self.model_config.canvas_size,
        )
        encoders.train()

        for step in tqdm(range(config.encoder_steps), desc="pretrain-encoders", disable=not progress):
            scenes = sample_batch(dataset, config.encoder_batch_size, seed, step)
            characters = [c for scene in scenes for c in scene.characters]
            faces = images_to_tensor(np.stack([c.face_crop for c in characters]), encoders.device)
            bodies = images_to_tensor(np.stack([c.body_crop for c in characters]), encoders.device)
            identity = torch.as_tensor([c.identity_id for c in characters], device=encoders.device)
            clothing = torch.as_tensor([c.clothing_id for c in characters], device=encoders.device)
            images = images_to_tensor(np.stack([s.image for s in scenes]), encoders.device)
            caption_ids = encoders.caption_ids([s.caption for s in scenes])

            face_loss = F.cross_entropy(face_head(encoders.face(faces)), identity)
            clothing_loss = F.cross_entropy(clothing_head(encoders.character(bodies).mean(dim=1)), clothing)
            text_tokens = encoders.text(caption_ids)
            text_vectors = encoders.scene.embed_text(
                FeatureSequence(tokens=text_tokens, role="text", mask=caption_ids != PAD_ID)
            )
            image_vectors = encoders.scene.embed_images(images)
            logits = encoders.scene.logit_scale.exp() * image_vectors @ text_vectors.t()
            targets = torch.arange(len(scenes), device=encoders.device)
            align_loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))

            loss = face_loss + clothing_loss + align_loss
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if step % config.log_interval == 0:
                self.logger.info(
                    f"step {step}: face={float(face_loss):.4f} clothing={float(clothing_loss):.4f} "
                    f"align={float(align_loss):.4f}"
                )
        return encoders.freeze()

    def run(self, out_dir: Optional[str] = None, seed: Optional[int] = None, device: Optional[str] = None,
            progress: bool = True) -> Tuple[str, ToyEncoders]:
        out_dir = out_dir or self.path_for("encoders")
        seed = self.pretrain_config.seed if seed is None else seed
        encoders = self.train(seed, device, progress)
        margin = identity_margin(encoders.cpu(), TRAIN_IDENTITIES, seed=seed)
        clothing = clothing_margin(encoders, TRAIN_IDENTITIES, seed=seed)
        self.logger.info(f"Identity separability margin over the training palette: {margin:.4f}")
        self.logger.info(f"Clothing separability margin over the training palette: {clothing:.4f}")
        save_components(out_dir, {"encoders": encoders.state_dict()}, {
            "kind": "encoders",
            "seed": seed,
            "model_config": self.model_config.to_dict(),
            "pretrain_config": self.pretrain_config.to_dict(),
            "identity_margin": margin,
            "clothing_margin": clothing,
        })
        self.logger.info(f"Encoder checkpoint written to {out_dir}")
        return out_dir, encoders


def load_encoders(path: str) -> ToyEncoders:
    manifest, components = load_components(path)
    if manifest.get("kind") not in ("encoders", "base", "story"):
        raise CheckpointError(f"{path} holds no encoders")
    encoders = ToyEncoders(ModelConfig.from_dict(manifest["model_config"]))
    load_module_state(encoders, components["encoders"], "encoders")
    return encoders.freeze()


def load_vae(path: str) -> ToyVAE:
    """The frozen VAE of a ``vae``, ``base`` or ``story`` checkpoint."""
    manifest, components = load_components(path)
    if manifest.get("kind") not in ("vae", "base", "story"):
        raise CheckpointError(f"{path} holds no VAE")
    vae = ToyVAE(ModelConfig.from_dict(manifest["model_config"]))
    load_module_state(vae, components["vae"], "vae")
    for parameter in vae.parameters():
        parameter.requires_grad_(False)
    return vae.eval()


def base_trainable(model: LatentDiffusion) -> List[nn.Parameter]:
    """U-Net parameters trained in base pretraining: everything but LoRA and the image branch."""
    return [
        p for name, p in model.unet.named_parameters()
        if ".lora." not in name and ".to_k_i." not in name and ".to_v_i." not in name
    ]


class BasePretrainer(WorkspaceManager):
    """Pretrains the VAE and the text-only U-Net on top of frozen encoders."""

    def __init__(
        self,
        workspace_path: Optional[str] = None,
        pretrain_config: Optional[PretrainConfig] = None,
        caption_drop_prob: float = 0.1,
    ):
        super().__init__(workspace_path, component="BasePretrainer")
        self.pretrain_config = pretrain_config or self.load_pretrain_config()
        self.caption_drop_prob = caption_drop_prob
        self.report_settings("BasePretrainer initialised with following settings:", {
            "vae_steps": self.pretrain_config.vae_steps,
            "base_steps": self.pretrain_config.base_steps,
            "vae_lr": self.pretrain_config.vae_lr,
            "base_lr": self.pretrain_config.base_lr,
            "seed": self.pretrain_config.seed,
        })

    def _dataset(self, config: ModelConfig, seed: int) -> SceneDataset:
        return generate_dataset(self.pretrain_config.dataset_size, mix=0.6, seed=seed,
                                identity_pool=TRAIN_IDENTITIES, canvas_size=config.canvas_size)

    def train_vae(self, model: LatentDiffusion, dataset: SceneDataset, seed: int, progress: bool = True) -> float:
        config = self.pretrain_config
        vae = model.vae
        device = model.null_text.device
        optimizer = torch.optim.Adam(vae.parameters(), lr=config.vae_lr)
        generator = torch.Generator().manual_seed(seed)
        vae.train()
        for step in tqdm(range(config.vae_steps), desc="pretrain-vae", disable=not progress):
            images = images_to_tensor(np.stack([s.image for s in sample_batch(dataset, config.vae_batch_size, seed, step)]), device)
            mean, logvar = vae.posterior(images)
            noise = torch.randn(mean.shape, generator=generator).to(device)
            z = mean + (0.5 * logvar).exp() * noise
            recon = vae.decoder(z)
            kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
            loss = F.mse_loss(recon, images) + config.vae_kl_weight * kl
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if step % config.log_interval == 0:
                self.logger.info(f"vae step {step}: loss={float(loss):.5f} kl={float(kl):.4f}")

        vae.eval()
        held = sample_batch(dataset, 64, seed, config.vae_steps)
        with torch.no_grad():
            mean, _ = vae.posterior(images_to_tensor(np.stack([s.image for s in held]), device))
            vae.latent_scale.fill_(1.0 / max(float(mean.std()), 1e-6))
        value = reconstruction_psnr(vae, held)
        for parameter in vae.parameters():
            parameter.requires_grad_(False)
        self.logger.info(f"VAE latent scale {float(vae.latent_scale):.4f}, reconstruction PSNR {value:.2f} dB")
        return value

    def train_unet(self, model: LatentDiffusion, encoders: ToyEncoders, dataset: SceneDataset, seed: int,
                   progress: bool = True) -> None:
        config = self.pretrain_config
        device = model.null_text.device
        parameters = base_trainable(model)
        optimizer = torch.optim.AdamW(parameters, lr=config.base_lr, weight_decay=0.01)
        generator = torch.Generator().manual_seed(seed)
        model.unet.train()
        for step in tqdm(range(config.base_steps), desc="pretrain-base", disable=not progress):
            scenes = sample_batch(dataset, config.base_batch_size, seed, step)
            size = len(scenes)
            drop = torch.rand(size, generator=generator) < self.caption_drop_prob
            timesteps = torch.randint(0, model.schedule.num_timesteps, (size,), generator=generator)
            c_t = encoders.encode_text([[] if d else s.caption for s, d in zip(scenes, drop.tolist())]).tokens
            with torch.no_grad():
                z0 = model.vae.encode_image(images_to_tensor(np.stack([s.image for s in scenes]), device))
            eps = torch.randn(z0.shape, generator=generator).to(device)
            z_t = add_noise(model.schedule, z0, timesteps, eps)
            loss = diffusion_loss(eps, model.predict_noise(z_t, timesteps.to(device), c_t))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if step % config.log_interval == 0:
                self.logger.info(f"base step {step}: l_sd={float(loss):.5f}")

    def run_vae(self, out_dir: Optional[str] = None, model_config: Optional[ModelConfig] = None,
                seed: Optional[int] = None, device: Optional[str] = None,
                progress: bool = True) -> Tuple[str, Dict[str, float]]:
        """Fit only the VAE and write it as a ``vae`` checkpoint."""
        out_dir = out_dir or self.path_for("base")
        model_config = model_config or self.load_model_config()
        seed = self.pretrain_config.seed if seed is None else seed
        torch.manual_seed(seed)
        model = LatentDiffusion(model_config).to(device or "cpu")
        vae_psnr = self.train_vae(model, self._dataset(model_config, seed), seed, progress)
        save_components(out_dir, {"vae": model.vae.state_dict()}, {
            "kind": "vae",
            "seed": seed,
            "model_config": model_config.to_dict(),
            "pretrain_config": self.pretrain_config.to_dict(),
            "vae_psnr": vae_psnr,
        })
        self.logger.info(f"VAE checkpoint written to {out_dir}")
        return out_dir, {"vae_psnr": vae_psnr}

    def run(self, encoders_path: Optional[str] = None, out_dir: Optional[str] = None, seed: Optional[int] = None,
            device: Optional[str] = None, progress: bool = True) -> Tuple[str, Dict[str, float]]:
        encoders_path = encoders_path or self.path_for("encoders")
        out_dir = out_dir or self.path_for("base")
        seed = self.pretrain_config.seed if seed is None else seed
        encoders = load_encoders(encoders_path).to(device or "cpu")
        model_config = encoders.config
        if model_config.to_dict() != self.load_model_config().to_dict():
            self.logger.warning("Workspace model config differs from the encoder checkpoint; using the checkpoint's")

        torch.manual_seed(seed)
        model = LatentDiffusion(model_config).to(device or "cpu")
        model.set_null_text(encoders.null_text(1).tokens)
        dataset = self._dataset(model_config, seed)
        vae_psnr = self.train_vae(model, dataset, seed, progress)
        self.train_unet(model, encoders, dataset, seed, progress)

        unet_state = dict(model.unet.state_dict())
        unet_state["null_text"] = model.null_text
        save_components(out_dir, {
            "encoders": encoders.state_dict(),
            "vae": model.vae.state_dict(),
            "unet": unet_state,
        }, {
            "kind": "base",
            "seed": seed,
            "model_config": model_config.to_dict(),
            "pretrain_config": self.pretrain_config.to_dict(),
            "schedule": model.schedule.to_dict(),
            "vae_psnr": vae_psnr,
        })
        self.logger.info(f"Base checkpoint written to {out_dir}")
        return out_dir, {"vae_psnr": vae_psnr}
