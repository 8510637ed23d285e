"""Decoupled cross-attention with LoRA deltas, and attention-probability recording.

Each cross-attention layer attends twice with one shared query:

    Z_new = Attention(Q, K_t, V_t) + gamma * Attention(Q, K_i, V_i)

The two softmaxes run over disjoint key sets (text tokens and image-prompt tokens).
Every projection is ``x @ (W + scale * down @ up)``.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
from einops import rearrange
from torch import nn

from .errors import NumericFailure, ValidationError
from .ppr import ConditioningBundle, RegionSlice


class LoRADelta(nn.Module):
    """Low-rank factors of a weight update, ``delta_W = scale * down @ up``.

    ``up`` starts at zero so a fresh delta leaves its base weight unchanged.
    """

    def __init__(self, in_features: int, out_features: int, rank: int = 4, scale: Optional[float] = None):
        super().__init__()
        if rank < 1:
            raise ValidationError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = rank
        self.scale = 1.0 / rank if scale is None else float(scale)
        self.down = nn.Parameter(torch.randn(in_features, rank) / rank)
        self.up = nn.Parameter(torch.zeros(rank, out_features))

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.down @ self.up)


def apply_lora(W: torch.Tensor, delta: Optional[LoRADelta]) -> torch.Tensor:
    """Effective (in, out) matrix ``W + scale * down @ up``."""
    if delta is None:
        return W
    if delta.down.shape[1] != delta.up.shape[0]:
        raise ValidationError(
            f"LoRA rank mismatch: down has rank {delta.down.shape[1]}, up has rank {delta.up.shape[0]}"
        )
    if W.shape != (delta.down.shape[0], delta.up.shape[1]):
        raise ValidationError(
            f"LoRA factors {tuple(delta.down.shape)} @ {tuple(delta.up.shape)} do not fit W {tuple(W.shape)}"
        )
    return W + delta.delta_weight()


class LoRALinear(nn.Module):
    """A frozen-able ``nn.Linear`` with an optional trainable low-rank delta."""

    def __init__(self, in_features: int, out_features: int, rank: int = 0, bias: bool = False):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.lora = LoRADelta(in_features, out_features, rank) if rank > 0 else None

    def effective_weight(self) -> torch.Tensor:
        return apply_lora(self.base.weight.t(), self.lora)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x @ self.effective_weight()
        return out + self.base.bias if self.base.bias is not None else out


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Image-branch probabilities of one layer and their per-region sums.

    ``P`` is (B, h*w, (N+1)*L), averaged over heads. ``A`` is (B, N+1, h, w).
    """

    layer_id: str
    P: torch.Tensor
    A: torch.Tensor

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.A.shape[-2], self.A.shape[-1]


def aggregate_region_maps(
    P: torch.Tensor, layout: Sequence[RegionSlice], hw: Tuple[int, int]
) -> torch.Tensor:
    """Sum each region's columns of ``P`` and fold the query axis back to (h, w)."""
    squeeze = P.dim() == 2
    if squeeze:
        P = P[None]
    h, w = hw
    if P.shape[1] != h * w:
        raise ValidationError(f"P has {P.shape[1]} query rows, expected {h}x{w}")
    if layout[-1].stop != P.shape[-1] or layout[0].start != 0:
        raise ValidationError(f"Layout covers {layout[-1].stop} columns, P has {P.shape[-1]}")
    maps = torch.stack([P[..., region.start:region.stop].sum(dim=-1) for region in layout], dim=1)
    maps = rearrange(maps, "b k (h w) -> b k h w", h=h, w=w)
    return maps[0] if squeeze else maps


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericFailure(f"Non-finite values in {name}")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, head_dim: int = 16, lora_rank: int = 0):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.scale = head_dim ** -0.5
        self.to_q = LoRALinear(dim, inner, lora_rank)
        self.to_k = LoRALinear(dim, inner, lora_rank)
        self.to_v = LoRALinear(dim, inner, lora_rank)
        self.to_out = LoRALinear(inner, dim, lora_rank, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = (rearrange(f(x), "b n (h d) -> b h n d", h=self.heads) for f in (self.to_q, self.to_k, self.to_v))
        sim = torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale
        out = torch.einsum("b h i j, b h j d -> b h i d", sim.softmax(dim=-1), v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class DecoupledCrossAttention(nn.Module):
    """Text and image-prompt cross-attention sharing one query projection.

    Base projections of the text branch come from base pretraining and stay frozen
    afterwards. ``to_k_i`` / ``to_v_i`` and every LoRA delta are trained.
    """

    def __init__(
        self,
        query_dim: int,
        text_dim: int,
        image_dim: int,
        heads: int = 4,
        head_dim: int = 16,
        lora_rank: int = 4,
        gamma: float = 1.0,
    ):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.query_dim = query_dim
        self.scale = head_dim ** -0.5
        self.gamma = float(gamma)

        self.to_q = LoRALinear(query_dim, inner, lora_rank)
        self.to_k_t = LoRALinear(text_dim, inner, lora_rank)
        self.to_v_t = LoRALinear(text_dim, inner, lora_rank)
        self.to_k_i = LoRALinear(image_dim, inner, lora_rank)
        self.to_v_i = LoRALinear(image_dim, inner, lora_rank)
        self.to_out = LoRALinear(inner, query_dim, lora_rank, bias=True)

    @torch.no_grad()
    def init_image_branch_from_text(self) -> None:
        """Start the image-prompt key/value projections as copies of the text ones."""
        if self.to_k_i.base.weight.shape != self.to_k_t.base.weight.shape:
            raise ValidationError("Image and text context widths differ; cannot copy K/V weights")
        self.to_k_i.base.weight.copy_(self.to_k_t.base.weight)
        self.to_v_i.base.weight.copy_(self.to_v_t.base.weight)

    def _attend(self, q: torch.Tensor, context: torch.Tensor, to_k: LoRALinear, to_v: LoRALinear):
        k = rearrange(to_k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(to_v(context), "b n (h d) -> b h n d", h=self.heads)
        sim = torch.einsum("b h i d, b h j d -> b h i j", q, k) * self.scale
        attn = sim.softmax(dim=-1)
        out = torch.einsum("b h i j, b h j d -> b h i d", attn, v)
        return rearrange(out, "b h n d -> b n (h d)"), attn

    def forward(
        self,
        z: torch.Tensor,
        text: torch.Tensor,
        image: Optional[torch.Tensor] = None,
        record: bool = False,
        gamma: Optional[Union[float, torch.Tensor]] = None,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Return the attended features and, when ``record`` is set, head-averaged image P."""
        if z.dim() != 3 or z.shape[-1] != self.query_dim:
            raise ValidationError(f"Query features must be (B, n, {self.query_dim}), got {tuple(z.shape)}")
        if text.dim() != 3 or text.shape[0] != z.shape[0] or text.shape[-1] != self.to_k_t.base.in_features:
            raise ValidationError(f"Text context of shape {tuple(text.shape)} does not fit this layer")
        if image is not None and (
            image.dim() != 3 or image.shape[0] != z.shape[0] or image.shape[-1] != self.to_k_i.base.in_features
        ):
            raise ValidationError(f"Image context of shape {tuple(image.shape)} does not fit this layer")

        q = rearrange(self.to_q(z), "b n (h d) -> b h n d", h=self.heads)
        out, _ = self._attend(q, text, self.to_k_t, self.to_v_t)
        probabilities = None
        if image is not None:
            image_out, image_attn = self._attend(q, image, self.to_k_i, self.to_v_i)
            out = out + (self.gamma if gamma is None else gamma) * image_out
            if record:
                probabilities = image_attn.mean(dim=1)
        return self.to_out(out), probabilities


def attend(
    layer: DecoupledCrossAttention,
    Z: torch.Tensor,
    c_t: torch.Tensor,
    c_i: Optional[ConditioningBundle],
    record: bool = False,
    hw: Optional[Tuple[int, int]] = None,
    layer_id: str = "",
    gamma: Optional[Union[float, torch.Tensor]] = None,
) -> Tuple[torch.Tensor, Optional[AttentionRecord]]:
    """One decoupled cross-attention call; records image-branch maps on request.

    Args:
        Z: (B, h*w, query_dim) query features.
        c_t: (B, T_t, text_dim) text tokens.
        c_i: Image-prompt bundle, or ``None`` to skip the image branch.
        hw: Spatial shape of the queries, needed when recording.
    """
    _check_finite("query features", Z)
    _check_finite("text context", c_t)
    if c_i is not None:
        _check_finite("image context", c_i.c_i)
    if record and hw is None:
        raise ValidationError("Recording attention needs the query resolution hw")

    out, probabilities = layer(Z, c_t, None if c_i is None else c_i.c_i, record=record, gamma=gamma)
    if probabilities is None:
        return out, None
    return out, AttentionRecord(layer_id, probabilities, aggregate_region_maps(probabilities, c_i.layout, hw))
