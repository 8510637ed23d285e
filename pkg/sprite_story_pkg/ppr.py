"""Positional-aware perceiver resampler: per-character fusion into one conditioning matrix.

Face and character features go through two independent resamplers. Each character's
pair is concatenated channel-wise, offset by that slot's positional table and
projected back by an MLP. A learnable background block comes first:

    c_i = [E_bg; E_1; ...; E_N]        shape ((N + 1) * L, D) per sample
"""
import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
from einops import rearrange, repeat
from torch import nn

from .config import ModelConfig
from .encoders import FaceEmbedding, FeatureSequence
from .errors import ValidationError


def FeedForward(dim: int, mult: int = 2) -> nn.Sequential:
    inner_dim = int(dim * mult)
    return nn.Sequential(
        nn.LayerNorm(dim),
        nn.Linear(dim, inner_dim, bias=False),
        nn.GELU(),
        nn.Linear(inner_dim, dim, bias=False),
    )


class PerceiverAttention(nn.Module):
    """Latents attend over the inputs concatenated with the latents themselves."""

    def __init__(self, *, dim: int, dim_head: int = 16, heads: int = 4):
        super().__init__()
        self.scale = dim_head ** -0.5
        self.heads = heads
        inner_dim = dim_head * heads

        self.norm_media = nn.LayerNorm(dim)
        self.norm_latents = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, inner_dim, bias=False)
        self.to_kv = nn.Linear(dim, inner_dim * 2, bias=False)
        self.to_out = nn.Linear(inner_dim, dim, bias=False)

    def forward(self, x: torch.Tensor, latents: torch.Tensor) -> torch.Tensor:
        x = self.norm_media(x)
        latents = self.norm_latents(latents)

        q = self.to_q(latents)
        kv_input = torch.cat((x, latents), dim=-2)
        k, v = self.to_kv(kv_input).chunk(2, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))

        sim = torch.einsum("b h i d, b h j d -> b h i j", q * self.scale, k)
        sim = sim - sim.amax(dim=-1, keepdim=True).detach()
        attn = sim.softmax(dim=-1)

        out = torch.einsum("b h i j, b h j d -> b h i d", attn, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class Resampler(nn.Module):
    """Maps any number of input tokens to exactly ``num_latents`` output tokens."""

    def __init__(
        self,
        *,
        in_dim: int,
        dim: int,
        num_latents: int = 4,
        depth: int = 2,
        dim_head: int = 16,
        heads: int = 4,
        ff_mult: int = 2,
        out_dim: Optional[int] = None,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.latents = nn.Parameter(torch.randn(num_latents, dim) * dim ** -0.5)
        self.proj_in = nn.Linear(in_dim, dim)
        self.layers = nn.ModuleList([])
        for _ in range(depth):
            self.layers.append(nn.ModuleList([
                PerceiverAttention(dim=dim, dim_head=dim_head, heads=heads),
                FeedForward(dim=dim, mult=ff_mult),
            ]))
        self.proj_out = nn.Linear(dim, out_dim or dim)
        self.norm_out = nn.LayerNorm(out_dim or dim)

    @property
    def num_latents(self) -> int:
        return self.latents.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[:, None, :]
        if x.shape[1] < 1:
            raise ValidationError("Resampler needs at least one input token")
        if x.shape[-1] != self.in_dim:
            raise ValidationError(f"Resampler expects width {self.in_dim}, got features of width {x.shape[-1]}")

        latents = repeat(self.latents, "n d -> b n d", b=x.shape[0])
        x = self.proj_in(x)
        for attn, ff in self.layers:
            latents = attn(x, latents) + latents
            latents = ff(latents) + latents
        return self.norm_out(self.proj_out(latents))


def resample(r: Resampler, features: Union[FeatureSequence, FaceEmbedding, torch.Tensor]) -> torch.Tensor:
    """Run one resampler over a feature sequence; returns (B, L, D)."""
    if isinstance(features, FaceEmbedding):
        features = features.as_sequence()
    tokens = features.tokens if isinstance(features, FeatureSequence) else features
    return r(tokens)


@dataclass(frozen=True)
class RegionSlice:
    name: str
    start: int
    stop: int


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    """Image-prompt tokens ``c_i`` of shape (B, (N + 1) * L, D) and their row layout."""

    c_i: torch.Tensor
    layout: Tuple[RegionSlice, ...]
    num_characters: int
    tokens_per_region: int
    dim: int

    def __post_init__(self):
        rows = (self.num_characters + 1) * self.tokens_per_region
        if self.c_i.dim() != 3 or self.c_i.shape[1] != rows or self.c_i.shape[2] != self.dim:
            raise ValidationError(
                f"c_i shape {tuple(self.c_i.shape)} does not match ({rows}, {self.dim}) for "
                f"N={self.num_characters}, L={self.tokens_per_region}"
            )
        validate_layout(self.layout, rows)

    @property
    def num_regions(self) -> int:
        return self.num_characters + 1

    def region(self, k: int) -> torch.Tensor:
        region = self.layout[k]
        return self.c_i[:, region.start:region.stop]

    def with_tokens(self, c_i: torch.Tensor) -> "ConditioningBundle":
        return ConditioningBundle(c_i, self.layout, self.num_characters, self.tokens_per_region, self.dim)

    def zeros_like(self) -> "ConditioningBundle":
        """Same layout with all-zero tokens: the null image prompt."""
        return self.with_tokens(torch.zeros_like(self.c_i))

    def digest(self) -> str:
        data = self.c_i.detach().to("cpu", torch.float32).contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()


def make_layout(num_characters: int, tokens_per_region: int) -> Tuple[RegionSlice, ...]:
    names = ["background"] + [f"character_{k}" for k in range(1, num_characters + 1)]
    return tuple(
        RegionSlice(name, k * tokens_per_region, (k + 1) * tokens_per_region) for k, name in enumerate(names)
    )


def validate_layout(layout: Sequence[RegionSlice], rows: int) -> None:
    """Regions must tile ``rows`` contiguously from zero without overlap."""
    cursor = 0
    for region in layout:
        if region.start != cursor or region.stop <= region.start:
            raise ValidationError(f"Region {region.name} [{region.start}, {region.stop}) breaks the layout at row {cursor}")
        cursor = region.stop
    if cursor != rows:
        raise ValidationError(f"Layout covers {cursor} rows, expected {rows}")


class PositionalPerceiverResampler(nn.Module):
    """Two resamplers, the per-slot positional table, the background tokens and the fusion MLP."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        dim, length = c.cond_dim, c.num_tokens
        resampler_args = dict(
            dim=dim, num_latents=length, depth=c.resampler_depth, dim_head=c.resampler_head_dim,
            heads=c.resampler_heads, ff_mult=c.resampler_ff_mult, out_dim=dim,
        )
        self.r1 = Resampler(in_dim=c.face_dim, **resampler_args)
        self.r2 = Resampler(in_dim=c.encoder_dim, **resampler_args)
        self.e_pos = nn.Parameter(torch.randn(c.max_characters, length, 2 * dim) * dim ** -0.5)
        self.e_bg = nn.Parameter(torch.randn(length, dim) * dim ** -0.5)
        self.fuse_mlp = nn.Sequential(
            nn.Linear(2 * dim, c.fuse_hidden_mult * dim),
            nn.GELU(),
            nn.Linear(c.fuse_hidden_mult * dim, dim),
        )

    @property
    def tokens_per_region(self) -> int:
        return self.e_bg.shape[0]

    @property
    def dim(self) -> int:
        return self.e_bg.shape[1]

    @property
    def max_characters(self) -> int:
        return self.e_pos.shape[0]

    def fuse_character(self, e1: torch.Tensor, e2: torch.Tensor, slot: int) -> torch.Tensor:
        """MLP(Cat(e1, e2) + E_pos[slot]) with channel-wise concatenation."""
        if not 0 <= slot < self.max_characters:
            raise ValidationError(f"slot {slot} out of range for {self.max_characters} character slots")
        if e1.shape != e2.shape:
            raise ValidationError(f"e1 {tuple(e1.shape)} and e2 {tuple(e2.shape)} must match")
        return self.fuse_mlp(torch.cat((e1, e2), dim=-1) + self.e_pos[slot])

    def build_conditioning(
        self,
        refs: Sequence[Tuple[FaceEmbedding, FeatureSequence]],
        zero_character: Union[bool, torch.Tensor] = False,
    ) -> ConditioningBundle:
        """Fuse each (face, character) reference into its slot, background block first.

        Args:
            refs: One (face, character) pair per character, in slot order.
            zero_character: ``True`` replaces every E_2 by zeros before fusion; a (B,)
                boolean tensor does so per sample.
        """
        if len(refs) == 0:
            raise ValidationError("build_conditioning needs at least one character reference")
        if len(refs) > self.max_characters:
            raise ValidationError(f"{len(refs)} characters given, at most {self.max_characters} are supported")

        blocks: List[torch.Tensor] = []
        for slot, (face, character) in enumerate(refs):
            e1 = resample(self.r1, face)
            e2 = resample(self.r2, character)
            if isinstance(zero_character, torch.Tensor):
                keep = (~zero_character.to(torch.bool)).to(e2.dtype).to(e2.device)
                e2 = e2 * keep.view(-1, 1, 1)
            elif zero_character:
                e2 = torch.zeros_like(e2)
            blocks.append(self.fuse_character(e1, e2, slot))

        batch = blocks[0].shape[0]
        background = repeat(self.e_bg, "n d -> b n d", b=batch)
        c_i = torch.cat([background] + blocks, dim=1)
        return ConditioningBundle(
            c_i=c_i,
            layout=make_layout(len(refs), self.tokens_per_region),
            num_characters=len(refs),
            tokens_per_region=self.tokens_per_region,
            dim=self.dim,
        )


def interpolate_conditioning(a: ConditioningBundle, b: ConditioningBundle, t: float) -> ConditioningBundle:
    """Row-wise (1 - t) * a + t * b; the endpoints reproduce ``a`` and ``b`` exactly."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    if a.c_i.shape != b.c_i.shape or a.layout != b.layout:
        raise ValidationError(
            f"Cannot interpolate bundles of shape {tuple(a.c_i.shape)} and {tuple(b.c_i.shape)}"
        )
    t = float(t)
    return a.with_tokens((1.0 - t) * a.c_i + t * b.c_i)
