"""Frozen toy encoders (face, character, text, scene image) and the pose rasterizer.

The encoders are small networks pretrained once by ``pretrain-encoders`` and then
frozen: every ``encode_*`` method runs under ``torch.no_grad`` in eval mode and the
trainer never hands their parameters to an optimizer.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .config import ModelConfig
from .errors import ValidationError

PAD_ID = 0
ROLES = ("face", "character", "text", "fused")

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True, eq=False)
class FaceEmbedding:
    """Unit-norm face vectors, shape (B, D_f)."""

    vector: torch.Tensor

    def as_sequence(self) -> "FeatureSequence":
        return FeatureSequence(tokens=self.vector[:, None, :], role="face")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """A batch of token matrices (B, T, D) tagged with the role they play."""

    tokens: torch.Tensor
    role: str
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"Unknown feature role '{self.role}', expected one of {ROLES}")
        if self.tokens.dim() != 3 or self.tokens.shape[1] < 1:
            raise ValidationError(f"FeatureSequence needs (B, T>=1, D) tokens, got {tuple(self.tokens.shape)}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


def rasterize_pose(
    keypoints: ArrayLike,
    resolution: int,
    canvas_size: int = 64,
    radius: Optional[float] = None,
    channels: int = 7,
) -> np.ndarray:
    """Draw every keypoint as a filled disc in its own channel.

    Args:
        keypoints: (K, 2) or (M, K, 2) array of (x, y) canvas coordinates. NaN
            entries mark missing keypoints and are skipped.
        resolution: Side of the output raster in pixels.
        canvas_size: Side of the canvas the coordinates refer to.
        radius: Disc radius in canvas pixels, ``2.5`` at canvas 64 by default.
        channels: Keypoint count K, one raster channel per keypoint.

    Returns:
        float32 array of shape (channels, resolution, resolution) with values in {0, 1}.
    """
    if resolution < 1:
        raise ValidationError(f"resolution must be >= 1, got {resolution}")
    raster = np.zeros((channels, resolution, resolution), dtype=np.float32)
    points = np.asarray(keypoints.detach().cpu() if isinstance(keypoints, torch.Tensor) else keypoints,
                        dtype=np.float64)
    if points.size == 0:
        return raster
    if points.ndim == 2:
        points = points[None]
    if points.ndim != 3 or points.shape[1:] != (channels, 2):
        raise ValidationError(f"keypoints must have shape (K={channels}, 2) or (M, {channels}, 2), got {points.shape}")
    finite = np.isfinite(points).all(axis=-1)
    if np.any((points[finite] < 0) | (points[finite] > canvas_size)):
        raise ValidationError("keypoints must lie within the canvas")

    radius = 2.5 * canvas_size / 64.0 if radius is None else float(radius)
    step = canvas_size / resolution
    centres = (np.arange(resolution) + 0.5) * step
    ys, xs = np.meshgrid(centres, centres, indexing="ij")
    for person, channel in zip(*np.nonzero(finite)):
        x, y = points[person, channel]
        raster[channel][(xs - x) ** 2 + (ys - y) ** 2 <= radius ** 2] = 1.0
    return raster


def images_to_tensor(images: ArrayLike, device: Optional[torch.device] = None) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) images in [0, 1] to a float (B, 3, H, W) tensor."""
    tensor = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(images))
    tensor = tensor.float()
    if tensor.dim() == 3:
        tensor = tensor[None]
    if tensor.dim() != 4 or tensor.shape[-1] != 3:
        raise ValidationError(f"Expected images shaped (B, H, W, 3), got {tuple(tensor.shape)}")
    tensor = rearrange(tensor, "b h w c -> b c h w")
    return tensor.to(device) if device is not None else tensor


def _reject_empty(batch: torch.Tensor, what: str) -> None:
    if batch.numel() == 0 or bool((batch.flatten(1).abs().amax(dim=1) == 0).any()):
        raise ValidationError(f"empty {what} region")


class FaceEncoder(nn.Module):
    def __init__(self, crop_size: int = 16, dim: int = 64):
        super().__init__()
        reduced = crop_size // 4
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(64 * reduced * reduced, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(self.features(x).flatten(1)), dim=-1)


class CharacterEncoder(nn.Module):
    """Patch-grid tokens of a body crop: one token per ``patch_size`` square."""

    def __init__(self, crop_size: int = 32, patch_size: int = 8, dim: int = 64):
        super().__init__()
        grid = crop_size // patch_size
        self.patch_embed = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.pos_emb = nn.Parameter(torch.randn(grid * grid, dim) * dim ** -0.5)
        self.mixer = nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = rearrange(self.patch_embed(x), "b d h w -> b (h w) d") + self.pos_emb
        tokens = tokens + self.mixer(tokens)
        return self.norm(tokens)


class TextEncoder(nn.Module):
    """Token and position embeddings followed by one self-attention mixer.

    Padding keys are masked for captions with at least one word. The all-pad null
    caption attends over every position so it maps to a fixed finite matrix.
    """

    def __init__(self, vocab_size: int = 64, max_len: int = 8, dim: int = 64, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.token_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.norm_attn = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.token_emb(ids) + self.pos_emb[: ids.shape[1]]
        pad = ids == PAD_ID
        key_mask = pad & ~pad.all(dim=1, keepdim=True)

        q, k, v = self.to_qkv(self.norm_attn(x)).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        sim = torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale
        sim = sim.masked_fill(key_mask[:, None, None, :], float("-inf"))
        out = torch.einsum("b h i j, b h j d -> b h i d", sim.softmax(dim=-1), v)
        x = x + self.to_out(rearrange(out, "b h n d -> b n (h d)"))
        x = x + self.ff(x)
        return self.norm_out(x)


class SceneEncoder(nn.Module):
    """Image tower and text projection aligned contrastively for caption agreement."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.image_proj = nn.Linear(64, dim)
        self.text_proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))

    def embed_images(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_proj(self.features(x)), dim=-1)

    def embed_text(self, text: FeatureSequence) -> torch.Tensor:
        weights = text.mask.float() if text.mask is not None else torch.ones(text.tokens.shape[:2])
        weights = weights.to(text.tokens.device)
        empty = weights.sum(dim=1, keepdim=True) == 0
        weights = torch.where(empty, torch.ones_like(weights), weights)
        pooled = (text.tokens * weights[..., None]).sum(dim=1) / weights.sum(dim=1, keepdim=True)
        return F.normalize(self.text_proj(pooled), dim=-1)


class ToyEncoders(nn.Module):
    """The four frozen encoders behind one checkpointable module."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.face = FaceEncoder(c.face_crop_size, c.face_dim)
        self.character = CharacterEncoder(c.body_crop_size, c.patch_size, c.encoder_dim)
        self.text = TextEncoder(c.vocab_size, c.max_caption_len, c.encoder_dim)
        self.scene = SceneEncoder(c.encoder_dim)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def freeze(self) -> "ToyEncoders":
        self.eval()
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self

    def caption_ids(self, captions: Union[ArrayLike, Sequence[Sequence[int]]]) -> torch.Tensor:
        """Pad token-id sequences to ``max_caption_len``; reject out-of-vocabulary ids."""
        max_len, vocab = self.config.max_caption_len, self.config.vocab_size
        if isinstance(captions, torch.Tensor) and captions.dim() == 2:
            rows = [row.tolist() for row in captions]
        elif isinstance(captions, np.ndarray) and captions.ndim == 2:
            rows = captions.tolist()
        else:
            rows = [list(np.asarray(c, dtype=np.int64).reshape(-1)) for c in captions]
        ids = torch.full((len(rows), max_len), PAD_ID, dtype=torch.long)
        for i, row in enumerate(rows):
            if len(row) > max_len:
                raise ValidationError(f"Caption of {len(row)} tokens exceeds max_caption_len {max_len}")
            bad = [int(t) for t in row if not 0 <= int(t) < vocab]
            if bad:
                raise ValidationError(f"Out-of-vocabulary token ids {bad} (vocabulary size {vocab})")
            ids[i, : len(row)] = torch.as_tensor([int(t) for t in row], dtype=torch.long)
        return ids.to(self.device)

    @torch.no_grad()
    def encode_face(self, face_crops: ArrayLike) -> FaceEmbedding:
        x = images_to_tensor(face_crops, self.device)
        _reject_empty(x, "face")
        return FaceEmbedding(vector=self.face(x))

    @torch.no_grad()
    def encode_character(self, body_crops: ArrayLike) -> FeatureSequence:
        x = images_to_tensor(body_crops, self.device)
        _reject_empty(x, "character")
        return FeatureSequence(tokens=self.character(x), role="character")

    @torch.no_grad()
    def encode_text(self, captions: Union[ArrayLike, Sequence[Sequence[int]]]) -> FeatureSequence:
        ids = self.caption_ids(captions)
        return FeatureSequence(tokens=self.text(ids), role="text", mask=ids != PAD_ID)

    @torch.no_grad()
    def null_text(self, batch_size: int = 1) -> FeatureSequence:
        """The unconditional prompt: an all-pad caption."""
        return self.encode_text([[] for _ in range(batch_size)])

    @torch.no_grad()
    def text_image_similarity(self, images: torch.Tensor, captions) -> torch.Tensor:
        """Cosine agreement between (B, 3, H, W) images and their captions."""
        text = self.encode_text(captions)
        return (self.scene.embed_images(images.to(self.device)) * self.scene.embed_text(text)).sum(dim=-1)
