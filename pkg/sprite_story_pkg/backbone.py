"""Toy latent diffusion backbone: VAE, noise schedule, U-Net, pose branch and DDIM sampler.

The U-Net works on 8x8 latents, downsamples twice (8 -> 4 -> 2) and places one
transformer block with decoupled cross-attention at every decoder resolution:
``mid_2x2``, ``up_4x4`` and ``up_8x8`` (for a 64 pixel canvas). The pose branch is a
trainable copy of the encoder half whose residuals pass through zero convolutions,
so a fresh branch changes nothing.
"""
import copy
import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .attention import AttentionRecord, DecoupledCrossAttention, SelfAttention, attend
from .config import ModelConfig
from .errors import NumericFailure, ValidationError
from .ppr import ConditioningBundle

TimeLike = Union[int, torch.Tensor]

logger = logging.getLogger("LatentDiffusion")


@dataclass(frozen=True, eq=False)
class LatentState:
    z: torch.Tensor
    t: int


class NoiseSchedule:
    """Linear betas and their cumulative products, kept in float64."""

    def __init__(self, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValidationError("betas must satisfy 0 < beta_start <= beta_end < 1")
        self.num_timesteps = num_timesteps
        self.betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(self.alphas, dim=0)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "NoiseSchedule":
        return cls(config.num_timesteps, config.beta_start, config.beta_end)

    def to_dict(self) -> Dict:
        return {
            "kind": "linear",
            "num_timesteps": self.num_timesteps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    def check_timesteps(self, t: TimeLike) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() == 0 or int(t.min()) < 0 or int(t.max()) >= self.num_timesteps:
            raise ValidationError(f"timesteps must lie in [0, {self.num_timesteps}), got {t.tolist()}")
        return t

    def alpha_bar(self, t: TimeLike, like: torch.Tensor) -> torch.Tensor:
        """alpha_bar_t broadcast against ``like`` (B, C, H, W)."""
        t = self.check_timesteps(t)
        values = self.alphas_cumprod[t.cpu()].to(device=like.device, dtype=like.dtype)
        if values.dim() == 0:
            return values
        return values.view(-1, *([1] * (like.dim() - 1)))


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: TimeLike, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    if z0.shape != eps.shape:
        raise ValidationError(f"z0 {tuple(z0.shape)} and noise {tuple(eps.shape)} must match")
    alpha_bar = schedule.alpha_bar(t, z0)
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps


class ToyVAE(nn.Module):
    """Convolutional VAE with an 8x downsampling factor."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config.latent_channels
        levels = int(round(math.log2(self.config.latent_factor)))
        if 2 ** levels != self.config.latent_factor:
            raise ValidationError("latent_factor must be a power of two")

        encoder: List[nn.Module] = [nn.Conv2d(3, 32, 3, padding=1), nn.SiLU()]
        channels = 32
        for _ in range(levels):
            encoder += [nn.Conv2d(channels, 64, 4, stride=2, padding=1), nn.SiLU()]
            channels = 64
        encoder.append(nn.Conv2d(channels, 2 * c, 1))
        self.encoder = nn.Sequential(*encoder)

        decoder: List[nn.Module] = [nn.Conv2d(c, 64, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            decoder += [nn.ConvTranspose2d(64, 64, 4, stride=2, padding=1), nn.SiLU()]
        decoder += [nn.Conv2d(64, 3, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*decoder)
        self.register_buffer("latent_scale", torch.ones(()))

    def posterior(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        factor = self.config.latent_factor
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] % factor or x.shape[3] % factor:
            raise ValidationError(f"Images must be (B, 3, H, W) with H, W divisible by {factor}, got {tuple(x.shape)}")
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """Posterior mean, scaled to roughly unit variance."""
        mean, _ = self.posterior(x)
        return mean * self.latent_scale

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.SiLU(), nn.Linear(2 * width, 2 * width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.width)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(8, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def zero_module(module: nn.Module) -> nn.Module:
    for parameter in module.parameters():
        nn.init.zeros_(parameter)
    return module


class TransformerBlock(nn.Module):
    """Self-attention, decoupled cross-attention and feed-forward over a feature map."""

    def __init__(self, layer_id: str, channels: int, config: ModelConfig):
        super().__init__()
        self.layer_id = layer_id
        self.norm_in = nn.GroupNorm(8, channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = SelfAttention(
            channels, config.attn_heads, config.attn_head_dim,
            lora_rank=config.lora_rank if config.lora_self_attention else 0,
        )
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = DecoupledCrossAttention(
            channels, config.encoder_dim, config.cond_dim,
            heads=config.attn_heads, head_dim=config.attn_head_dim, lora_rank=config.lora_rank,
        )
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        image: Optional[ConditioningBundle],
        record: bool = False,
        gamma: Optional[float] = None,
    ) -> Tuple[torch.Tensor, Optional[AttentionRecord]]:
        h, w = x.shape[-2:]
        tokens = rearrange(self.proj_in(self.norm_in(x)), "b c h w -> b (h w) c")
        tokens = tokens + self.self_attn(self.norm1(tokens))
        attended, attention_record = attend(
            self.cross_attn, self.norm2(tokens), text, image,
            record=record, hw=(h, w), layer_id=self.layer_id, gamma=gamma,
        )
        tokens = tokens + attended
        tokens = tokens + self.ff(self.norm3(tokens))
        out = self.proj_out(rearrange(tokens, "b (h w) c -> b c h w", h=h, w=w))
        return x + out, attention_record


def attention_layer_ids(config: ModelConfig) -> Tuple[str, str, str]:
    size = config.latent_size
    return f"mid_{size // 4}x{size // 4}", f"up_{size // 2}x{size // 2}", f"up_{size}x{size}"


class ToyUNet(nn.Module):
    """Noise predictor with text and image-prompt cross-attention at each decoder resolution."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        width, temb_dim = c.unet_width, 2 * c.unet_width
        mid_id, up_mid_id, up_top_id = attention_layer_ids(c)

        self.time_embed = TimeEmbedding(width)
        self.conv_in = nn.Conv2d(c.latent_channels, width, 3, padding=1)
        self.down1 = ResBlock(width, width, temb_dim)
        self.downsample1 = Downsample(width)
        self.down2 = ResBlock(width, width, temb_dim)
        self.downsample2 = Downsample(width)
        self.mid_res = ResBlock(width, width, temb_dim)
        self.mid_attn = TransformerBlock(mid_id, width, c)
        self.upsample2 = Upsample(width)
        self.up2_res = ResBlock(2 * width, width, temb_dim)
        self.up2_attn = TransformerBlock(up_mid_id, width, c)
        self.upsample1 = Upsample(width)
        self.up1_res = ResBlock(2 * width, width, temb_dim)
        self.up1_attn = TransformerBlock(up_top_id, width, c)
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, c.latent_channels, 3, padding=1)

    def transformer_blocks(self) -> List[TransformerBlock]:
        return [self.mid_attn, self.up2_attn, self.up1_attn]

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        image: Optional[ConditioningBundle] = None,
        residuals: Optional[Dict[str, torch.Tensor]] = None,
        record: bool = False,
        gamma: Optional[float] = None,
    ) -> Tuple[torch.Tensor, List[AttentionRecord]]:
        if z.shape[-1] % 4 or z.shape[-2] % 4:
            raise ValidationError(f"Latent size {tuple(z.shape[-2:])} must be divisible by 4")
        temb = self.time_embed(t)
        records: List[AttentionRecord] = []

        h = self.conv_in(z)
        skip_top = self.down1(h, temb)
        skip_mid = self.down2(self.downsample1(skip_top), temb)
        h = self.mid_res(self.downsample2(skip_mid), temb)
        if residuals is not None:
            skip_top = skip_top + residuals["skip_top"]
            skip_mid = skip_mid + residuals["skip_mid"]
            h = h + residuals["mid"]

        for block, skip, upsample, res in (
            (self.mid_attn, None, None, None),
            (self.up2_attn, skip_mid, self.upsample2, self.up2_res),
            (self.up1_attn, skip_top, self.upsample1, self.up1_res),
        ):
            if skip is not None:
                h = res(torch.cat([upsample(h), skip], dim=1), temb)
            h, attention_record = block(h, text, image, record=record, gamma=gamma)
            if attention_record is not None:
                records.append(attention_record)

        return self.conv_out(F.silu(self.norm_out(h))), records


class PoseBranch(nn.Module):
    """Trainable copy of the U-Net encoder half driven by a rasterized pose map.

    Residuals leave through zero-initialised convolutions; the hint encoder's last
    convolution is zero-initialised too.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        width, temb_dim = c.unet_width, 2 * c.unet_width
        levels = int(round(math.log2(c.latent_factor)))

        hint: List[nn.Module] = [nn.Conv2d(c.pose_channels, 16, 3, padding=1), nn.SiLU()]
        channels = 16
        for _ in range(levels):
            hint += [nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.SiLU()]
            channels = 32
        hint.append(zero_module(nn.Conv2d(channels, width, 3, padding=1)))
        self.hint_encoder = nn.Sequential(*hint)

        self.time_embed = TimeEmbedding(width)
        self.conv_in = nn.Conv2d(c.latent_channels, width, 3, padding=1)
        self.down1 = ResBlock(width, width, temb_dim)
        self.downsample1 = Downsample(width)
        self.down2 = ResBlock(width, width, temb_dim)
        self.downsample2 = Downsample(width)
        self.mid_res = ResBlock(width, width, temb_dim)
        self.zero_top = zero_module(nn.Conv2d(width, width, 1))
        self.zero_mid = zero_module(nn.Conv2d(width, width, 1))
        self.zero_bottom = zero_module(nn.Conv2d(width, width, 1))

    @classmethod
    def from_unet(cls, unet: ToyUNet) -> "PoseBranch":
        """Initialise the encoder copy from a pretrained U-Net."""
        branch = cls(unet.config)
        for name in ("time_embed", "conv_in", "down1", "downsample1", "down2", "downsample2", "mid_res"):
            setattr(branch, name, copy.deepcopy(getattr(unet, name)))
        return branch.to(next(unet.parameters()).device)

    def forward(self, z: torch.Tensor, t: torch.Tensor, pose: torch.Tensor) -> Dict[str, torch.Tensor]:
        temb = self.time_embed(t)
        hint = self.hint_encoder(pose.to(z.dtype))
        if hint.shape[-2:] != z.shape[-2:]:
            raise ValidationError(f"Pose map of shape {tuple(pose.shape)} does not match latent {tuple(z.shape)}")
        h = self.conv_in(z) + hint
        top = self.down1(h, temb)
        mid = self.down2(self.downsample1(top), temb)
        bottom = self.mid_res(self.downsample2(mid), temb)
        return {"skip_top": self.zero_top(top), "skip_mid": self.zero_mid(mid), "mid": self.zero_bottom(bottom)}


class LatentDiffusion(nn.Module):
    """VAE, U-Net, optional pose branch and the noise schedule behind one predictor."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.vae = ToyVAE(self.config)
        self.unet = ToyUNet(self.config)
        self.pose_branch: Optional[PoseBranch] = None
        self.schedule = NoiseSchedule.from_config(self.config)
        self.register_buffer("null_text", torch.zeros(1, self.config.max_caption_len, self.config.encoder_dim))
        self._pose_ignored_reported = False

    def set_null_text(self, tokens: torch.Tensor) -> None:
        """Store the encoded all-pad caption used by unconditional passes."""
        self.null_text.copy_(tokens[:1].to(self.null_text.dtype))

    def attach_pose_branch(self) -> PoseBranch:
        if self.pose_branch is None:
            self.pose_branch = PoseBranch.from_unet(self.unet)
        return self.pose_branch

    def predict_noise_with_records(
        self,
        z_t: torch.Tensor,
        t: TimeLike,
        c_t: torch.Tensor,
        c_i: Optional[ConditioningBundle] = None,
        pose: Optional[torch.Tensor] = None,
        cfg_null: bool = False,
        record: bool = False,
        gamma: Optional[float] = None,
    ) -> Tuple[torch.Tensor, List[AttentionRecord]]:
        batch = z_t.shape[0]
        t = self.schedule.check_timesteps(t).to(z_t.device)
        if t.dim() == 0:
            t = t.expand(batch)
        if c_t.shape[0] != batch:
            raise ValidationError(f"Text context batch {c_t.shape[0]} does not match latent batch {batch}")
        if cfg_null:
            c_t = self.null_text.to(z_t.dtype).expand(batch, -1, -1)
            c_i = None if c_i is None else c_i.zeros_like()

        residuals = None
        if pose is not None and self.pose_branch is not None:
            residuals = self.pose_branch(z_t, t, pose)
        elif pose is not None and not self._pose_ignored_reported:
            logger.warning("Pose map supplied to a model without pose branch; predicting without pose")
            self._pose_ignored_reported = True

        eps, records = self.unet(z_t, t, c_t, c_i, residuals=residuals, record=record, gamma=gamma)
        if not torch.isfinite(eps).all():
            raise NumericFailure(
                f"Non-finite noise prediction at timesteps {t.tolist()} "
                f"(cfg_null={cfg_null}, pose={'on' if residuals is not None else 'off'})"
            )
        return eps, records

    def predict_noise(self, z_t, t, c_t, c_i=None, pose=None, cfg_null=False, gamma=None) -> torch.Tensor:
        eps, _ = self.predict_noise_with_records(z_t, t, c_t, c_i, pose, cfg_null=cfg_null, gamma=gamma)
        return eps


class DDIMSampler:
    """Deterministic DDIM (eta = 0) with classifier-free guidance.

    ``guidance == 1`` skips the unconditional pass, so it follows the purely
    conditional trajectory.
    """

    def __init__(self, model: LatentDiffusion):
        self.model = model

    def timesteps(self, steps: int) -> List[int]:
        if steps < 1:
            raise ValidationError(f"steps must be >= 1, got {steps}")
        total = self.model.schedule.num_timesteps
        return [int(t) for t in np.linspace(total - 1, 0, steps).round()]

    def guided_noise(self, z, t, c_t, c_i, pose, guidance, gamma=None) -> torch.Tensor:
        eps_cond = self.model.predict_noise(z, t, c_t, c_i, pose, gamma=gamma)
        if guidance == 1.0:
            return eps_cond
        eps_null = self.model.predict_noise(z, t, c_t, c_i, pose, cfg_null=True, gamma=gamma)
        return eps_null + guidance * (eps_cond - eps_null)

    @torch.no_grad()
    def sample_latents(
        self,
        c_t: torch.Tensor,
        c_i: Optional[ConditioningBundle] = None,
        pose: Optional[torch.Tensor] = None,
        steps: int = 25,
        guidance: float = 7.5,
        seed: int = 0,
        gamma: Optional[float] = None,
        return_intermediates: bool = False,
    ):
        model = self.model
        config = model.config
        batch = c_t.shape[0]
        device = c_t.device
        generator = torch.Generator().manual_seed(int(seed))
        shape = (batch, config.latent_channels, config.latent_size, config.latent_size)
        z = torch.randn(shape, generator=generator).to(device=device, dtype=c_t.dtype)

        timesteps = self.timesteps(steps)
        alphas_cumprod = model.schedule.alphas_cumprod
        intermediates: List[LatentState] = []
        for index, t in enumerate(timesteps):
            eps = self.guided_noise(z, t, c_t, c_i, pose, guidance, gamma)
            alpha_bar = float(alphas_cumprod[t])
            alpha_bar_prev = float(alphas_cumprod[timesteps[index + 1]]) if index + 1 < len(timesteps) else 1.0
            z0_pred = (z - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)
            z = math.sqrt(alpha_bar_prev) * z0_pred + math.sqrt(1.0 - alpha_bar_prev) * eps
            if return_intermediates:
                intermediates.append(LatentState(z.clone(), t))
        return (z, intermediates) if return_intermediates else z

    @torch.no_grad()
    def sample(
        self,
        c_t: torch.Tensor,
        c_i: Optional[ConditioningBundle] = None,
        pose: Optional[torch.Tensor] = None,
        steps: int = 25,
        guidance: float = 7.5,
        seed: int = 0,
        gamma: Optional[float] = None,
    ) -> torch.Tensor:
        """Images (B, 3, H, W) in [0, 1]; a pure function of parameters, conditioning and seed."""
        was_training = self.model.training
        self.model.eval()
        try:
            z = self.sample_latents(c_t, c_i, pose, steps, guidance, seed, gamma)
            return self.model.vae.decode_latent(z).clamp(0.0, 1.0)
        finally:
            self.model.train(was_training)
