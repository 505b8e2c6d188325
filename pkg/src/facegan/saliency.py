"""Salient-region extractor and adversarial composition."""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeError
from .generator import LATENT_CHANNELS, check_latent_shape, upsample_stage

DEFAULT_CLIP = (-3.0, 3.0)


class SaliencyExtractor(nn.Module):
    """Decodes shared encoder features into a 1-channel map in [0, 1]."""

    def __init__(self, bias: bool = True, activation: str = "silu"):
        super().__init__()
        w = LATENT_CHANNELS
        self.net = nn.Sequential(
            *upsample_stage(w, bias, activation),
            *upsample_stage(w, bias, activation),
            nn.Conv2d(w, 1, 3, padding=1, bias=bias),
            nn.BatchNorm2d(1),
            nn.Sigmoid(),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        check_latent_shape(features)
        return self.net(features)


def compose_adversarial(
    image: torch.Tensor,
    perturbation: torch.Tensor,
    saliency: torch.Tensor,
    clip: tuple[float, float] = DEFAULT_CLIP,
) -> torch.Tensor:
    """x_adv = clamp(x + s * p, lo, hi); s is broadcast over channels."""
    if image.shape != perturbation.shape:
        raise ShapeError(f"image {tuple(image.shape)} vs perturbation {tuple(perturbation.shape)}")
    if saliency.dim() != image.dim() or saliency.shape[-3] != 1 or saliency.shape[-2:] != image.shape[-2:]:
        raise ShapeError(f"saliency {tuple(saliency.shape)} does not align with image {tuple(image.shape)}")
    lo, hi = clip
    return torch.clamp(image + saliency * perturbation, lo, hi)
