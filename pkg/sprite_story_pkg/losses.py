"""Diffusion loss, attention-region loss and the composite training objective."""
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionRecord
from .errors import NumericFailure, ValidationError


@dataclass(frozen=True)
class LossReport:
    """Scalar summary of one step; ``objective`` is the tensor to backpropagate."""

    l_sd: float
    l_attn_per_layer: Tuple[float, ...]
    l_attn_mean: float
    total: float
    lambda_: float
    layer_ids: Tuple[str, ...] = ()
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self, step: int, lr: float) -> Dict[str, float]:
        return {"step": step, "lr": lr, "l_sd": self.l_sd, "l_attn_mean": self.l_attn_mean, "total": self.total}


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps.shape != eps_hat.shape:
        raise ValidationError(f"Noise {tuple(eps.shape)} and prediction {tuple(eps_hat.shape)} must match")
    return F.mse_loss(eps_hat, eps, reduction="mean")


def downsample_masks(masks: Union[np.ndarray, torch.Tensor], hw: Tuple[int, int]) -> torch.Tensor:
    """Area-average (B, K, H, W) or (K, H, W) binary masks to soft targets at ``hw``."""
    masks = torch.as_tensor(np.asarray(masks) if isinstance(masks, np.ndarray) else masks).float()
    if masks.dim() == 3:
        masks = masks[None]
    h, w = hw
    if masks.shape[-2] % h or masks.shape[-1] % w:
        raise ValidationError(f"Mask size {tuple(masks.shape[-2:])} is not a multiple of layer size {hw}")
    return F.adaptive_avg_pool2d(masks, (h, w))


def attention_loss(
    record: Union[AttentionRecord, torch.Tensor], masks: Union[np.ndarray, torch.Tensor]
) -> torch.Tensor:
    """Per-pixel MSE between region maps and masks, averaged over the N+1 regions and the batch.

    Args:
        record: An attention record or its (B, N+1, h, w) aggregated maps.
        masks: (B, N+1, H, W) scene masks; background first, same order as the layout.
    """
    maps = record.A if isinstance(record, AttentionRecord) else record
    if maps.dim() == 3:
        maps = maps[None]
    targets = downsample_masks(masks, tuple(maps.shape[-2:])).to(device=maps.device, dtype=maps.dtype)
    if targets.shape[:2] != maps.shape[:2]:
        raise ValidationError(
            f"{maps.shape[1]} attention regions for batch {maps.shape[0]} but masks have shape {tuple(targets.shape[:2])}"
        )
    return (maps - targets).pow(2).mean(dim=(-2, -1)).mean()


def composite_loss(
    l_sd: torch.Tensor,
    l_attn: Union[Sequence[torch.Tensor], Dict[str, torch.Tensor]],
    lam: float = 0.1,
) -> LossReport:
    """total = l_sd + lam * mean(l_attn over layers)."""
    if isinstance(l_attn, dict):
        layer_ids, values = tuple(l_attn.keys()), list(l_attn.values())
    else:
        values = list(l_attn)
        layer_ids = tuple(f"layer_{i}" for i in range(len(values)))
    if not values:
        raise ValidationError("composite_loss needs at least one attention layer")

    if not isinstance(l_sd, torch.Tensor):
        l_sd = torch.tensor(float(l_sd), dtype=torch.float64)
    values = [torch.as_tensor(v, dtype=l_sd.dtype, device=l_sd.device) for v in values]
    if not torch.isfinite(l_sd):
        raise NumericFailure(f"Non-finite diffusion loss l_sd={float(l_sd)}")
    for layer_id, value in zip(layer_ids, values):
        if not torch.isfinite(value):
            raise NumericFailure(f"Non-finite attention loss at layer {layer_id}: {float(value)}")

    l_attn_mean = torch.stack(values).mean()
    objective = l_sd + lam * l_attn_mean
    return LossReport(
        l_sd=float(l_sd),
        l_attn_per_layer=tuple(float(v) for v in values),
        l_attn_mean=float(l_attn_mean),
        total=float(objective),
        lambda_=float(lam),
        layer_ids=layer_ids,
        objective=objective,
    )
