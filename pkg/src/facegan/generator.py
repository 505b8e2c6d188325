"""Self-encoding perturbation generator.

Encoder: 9x9 conv, two stride-2 3x3 convs, three spectrally normalized 3x3
convs, six residual blocks; features sit at 1/4 of the input resolution with
64 channels. Decoder: two stride-2 transposed convs back to full size and a
3x3 conv to the image channels, squashed by tanh into [-1, 1].

Hidden activations default to SiLU: ReLU kinks make central differences at
h=1e-3 disagree with autograd by 5-100% on the toy configuration.
"""
from __future__ import annotations

import contextlib
from typing import Iterator

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

LATENT_CHANNELS = 64
DOWNSAMPLE = 4
ACTIVATIONS = {"silu": nn.SiLU, "elu": nn.ELU, "relu": nn.ReLU}


def make_activation(name: str) -> nn.Module:
    if name not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")
    return ACTIVATIONS[name]()


class SpectralNorm(nn.Module):
    """Weight parametrization dividing by the top singular value.

    The singular value is tracked with block power iteration: a persistent
    orthonormal block of right vectors is refined by one multiplication with
    W^T W per training forward and a Rayleigh-Ritz step picks the top pair.
    With a block of 32 this is within 1e-3 of the true norm after five steps
    on random 64x576 conv weights, where the single-vector method is ~10% off.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1, block_size: int = 32, eps: float = 1e-12):
        super().__init__()
        rows = weight.shape[0]
        cols = weight[0].numel()
        k = max(1, min(block_size, rows, cols))
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        self.frozen = False
        q, _ = torch.linalg.qr(torch.randn(cols, k, dtype=weight.dtype))
        self.register_buffer("_basis", q)
        self.register_buffer("_u", torch.zeros(rows, dtype=weight.dtype))
        self.register_buffer("_v", torch.zeros(cols, dtype=weight.dtype))
        self._ritz(weight.detach().reshape(rows, -1))

    @torch.no_grad()
    def _ritz(self, w: torch.Tensor) -> None:
        b = w @ self._basis
        _, _, vh = torch.linalg.svd(b, full_matrices=False)
        v = self._basis @ vh[0]
        v = v / v.norm().clamp_min(self.eps)
        u = w @ v
        self._u.copy_(u / u.norm().clamp_min(self.eps))
        self._v.copy_(v)

    @torch.no_grad()
    def power_iterate(self, weight: torch.Tensor, steps: int) -> None:
        w = weight.detach().reshape(weight.shape[0], -1)
        for _ in range(steps):
            q, _ = torch.linalg.qr(w.t() @ (w @ self._basis))
            self._basis.copy_(q)
        self._ritz(w)

    def sigma(self, weight: torch.Tensor) -> torch.Tensor:
        w = weight.reshape(weight.shape[0], -1)
        return torch.dot(self._u, w @ self._v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        if self.training and not self.frozen and self.n_power_iterations > 0:
            self.power_iterate(weight, self.n_power_iterations)
        return weight / self.sigma(weight).clamp_min(self.eps)


def spectral_norm(module: nn.Module, n_power_iterations: int = 1, block_size: int = 32) -> nn.Module:
    nn.utils.parametrize.register_parametrization(
        module, "weight", SpectralNorm(module.weight, n_power_iterations, block_size)
    )
    return module


def spectral_layers(model: nn.Module) -> list[tuple[nn.Module, SpectralNorm]]:
    out = []
    for m in model.modules():
        if nn.utils.parametrize.is_parametrized(m, "weight"):
            for p in m.parametrizations.weight:
                if isinstance(p, SpectralNorm):
                    out.append((m, p))
    return out


@contextlib.contextmanager
def frozen_spectral_state(model: nn.Module) -> Iterator[None]:
    """Suspend power-iteration updates, e.g. while finite differencing."""
    layers = [sn for _, sn in spectral_layers(model)]
    saved = [sn.frozen for sn in layers]
    for sn in layers:
        sn.frozen = True
    try:
        yield
    finally:
        for sn, f in zip(layers, saved):
            sn.frozen = f


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, bias: bool = True, activation: str = "silu"):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=bias),
            nn.BatchNorm2d(channels),
            make_activation(activation),
            nn.Conv2d(channels, channels, 3, padding=1, bias=bias),
            nn.BatchNorm2d(channels),
        )
        self.act = make_activation(activation)

    def forward(self, x):
        return self.act(x + self.branch(x))


def upsample_stage(channels: int, bias: bool = True, activation: str = "silu") -> list[nn.Module]:
    """3x3 stride-2 transposed conv that exactly doubles H and W, then BN + activation."""
    return [
        nn.ConvTranspose2d(channels, channels, 3, stride=2, padding=1, output_padding=1, bias=bias),
        nn.BatchNorm2d(channels),
        make_activation(activation),
    ]


def check_image_shape(x: torch.Tensor, channels: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != x.shape[3] or x.shape[2] % DOWNSAMPLE:
        raise ShapeError(
            f"expected N x {channels} x S x S with S divisible by {DOWNSAMPLE}, got {tuple(x.shape)}"
        )


def check_latent_shape(z: torch.Tensor) -> None:
    if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS or z.shape[2] != z.shape[3]:
        raise ShapeError(f"expected N x {LATENT_CHANNELS} x s x s latent features, got {tuple(z.shape)}")


class Generator(nn.Module):
    """Encoder/decoder emitting a same-size perturbation map in [-1, 1]."""

    def __init__(
        self,
        in_channels: int = 3,
        n_res_blocks: int = 6,
        bias: bool = True,
        sn_iterations: int = 1,
        activation: str = "silu",
    ):
        super().__init__()
        w = LATENT_CHANNELS
        act = activation
        self.in_channels = in_channels
        self.n_res_blocks = n_res_blocks
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, w, 9, padding=4, bias=bias),
            make_activation(act),
            nn.Conv2d(w, w, 3, stride=2, padding=1, bias=bias),
            make_activation(act),
            nn.Conv2d(w, w, 3, stride=2, padding=1, bias=bias),
            make_activation(act),
            *[
                m
                for _ in range(3)
                for m in (spectral_norm(nn.Conv2d(w, w, 3, padding=1, bias=bias), sn_iterations), make_activation(act))
            ],
            *[ResidualBlock(w, bias, act) for _ in range(n_res_blocks)],
        )
        self.decoder = nn.Sequential(
            *upsample_stage(w, bias, act),
            *upsample_stage(w, bias, act),
            nn.Conv2d(w, in_channels, 3, padding=1, bias=bias),
            nn.BatchNorm2d(in_channels),
            nn.Tanh(),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        check_image_shape(x, self.in_channels)
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        check_latent_shape(z)
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_res_blocks": self.n_res_blocks,
            "shapes": {k: list(v.shape) for k, v in self.state_dict().items()},
        }


def perturb_latent(
    features: torch.Tensor,
    noise_scale: float,
    seed: int | torch.Generator | None = None,
) -> torch.Tensor:
    """Add seeded N(0, noise_scale^2) noise to latent features."""
    if noise_scale < 0:
        raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}")
    if noise_scale == 0:
        return features
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed or 0))
    # drawn in float32 so the draw does not depend on the feature dtype
    noise = torch.randn(features.shape, generator=gen, dtype=torch.float32)
    return features + noise_scale * noise.to(device=features.device, dtype=features.dtype)
