"""Embedding network, Euclidean distance, triplet machinery and verification.

The embedder is a miniature Inception-ResNet: a conv stem, inception-style
residual blocks interleaved with stride-2 reductions, global average pooling
and a linear map to an L2-normalized D-vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EmptyTriplets, NumericalError, ShapeError
from .generator import make_activation

DEFAULT_MARGIN = 0.2
DEFAULT_THRESHOLDS = (0.0, 2.0, 401)


def conv_bn(cin: int, cout: int, k: int, stride: int = 1, activation: str = "silu") -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        make_activation(activation),
    )


class InceptionResidual(nn.Module):
    """Three parallel branches (1x1; 1x1-3x3; 1x1-3x3-3x3), concatenated,
    projected back by a 1x1 conv and added to the input with a fixed scale."""

    def __init__(self, channels: int, scale: float = 0.17, activation: str = "silu"):
        super().__init__()
        b = max(channels // 4, 8)
        a = activation
        self.scale = scale
        self.branch0 = conv_bn(channels, b, 1, activation=a)
        self.branch1 = nn.Sequential(conv_bn(channels, b, 1, activation=a), conv_bn(b, b, 3, activation=a))
        self.branch2 = nn.Sequential(
            conv_bn(channels, b, 1, activation=a), conv_bn(b, b, 3, activation=a), conv_bn(b, b, 3, activation=a)
        )
        self.project = nn.Conv2d(3 * b, channels, 1)
        self.act = make_activation(a)

    def forward(self, x):
        up = self.project(torch.cat([self.branch0(x), self.branch1(x), self.branch2(x)], dim=1))
        return self.act(x + self.scale * up)


class BasicResidual(nn.Module):
    def __init__(self, channels: int, scale: float = 1.0, activation: str = "silu"):
        super().__init__()
        self.scale = scale
        self.branch = nn.Sequential(
            conv_bn(channels, channels, 3, activation=activation),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
        )
        self.act = make_activation(activation)

    def forward(self, x):
        return self.act(x + self.scale * self.branch(x))


BLOCKS = {"inception": InceptionResidual, "basic": BasicResidual}


class Embedder(nn.Module):
    """Maps whitened faces to unit-length embeddings.

    ``n_blocks`` residual blocks are spread over ``n_reductions + 1`` stages;
    each reduction halves the resolution and doubles the width.
    """

    def __init__(
        self,
        in_channels: int = 3,
        dim: int = 128,
        n_blocks: int = 4,
        n_reductions: int = 3,
        width: int = 32,
        block: str = "inception",
        residual_scale: float = 0.17,
        activation: str = "silu",
    ):
        super().__init__()
        if block not in BLOCKS:
            raise ConfigError(f"unknown block type {block!r}")
        self.in_channels = in_channels
        self.dim = dim
        self.n_reductions = n_reductions
        stages = [n_blocks // (n_reductions + 1) + (1 if i < n_blocks % (n_reductions + 1) else 0)
                  for i in range(n_reductions + 1)]
        layers: list[nn.Module] = [conv_bn(in_channels, width, 3, activation=activation)]
        w = width
        for i, count in enumerate(stages):
            layers += [BLOCKS[block](w, residual_scale, activation) for _ in range(count)]
            if i < n_reductions:
                layers.append(conv_bn(w, 2 * w, 3, stride=2, activation=activation))
                w *= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(w, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        step = 2 ** self.n_reductions
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(
                f"expected N x {self.in_channels} x H x W with H, W divisible by {step}, got {tuple(x.shape)}"
            )
        h = self.features(x).mean(dim=(2, 3))
        out = F.normalize(self.head(h), dim=1)
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite embedding; training has diverged")
        return out

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "dim": self.dim,
            "shapes": {k: list(v.shape) for k, v in self.state_dict().items()},
        }


def full_scale_preset(in_channels: int = 3) -> Embedder:
    """Deeper/wider configuration closer to a full Inception-ResNet-V1 budget."""
    return Embedder(in_channels, dim=512, n_blocks=20, n_reductions=5, width=64)


@torch.no_grad()
def embed(images: torch.Tensor, embedder: Embedder, batch_size: int = 256) -> torch.Tensor:
    """Inference-mode embeddings (running BN statistics, no autograd)."""
    was_training = embedder.training
    embedder.eval()
    try:
        return torch.cat([embedder(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    finally:
        embedder.train(was_training)


def distance(a, b) -> torch.Tensor:
    """d = sqrt(sum_m (a_m - b_m)^2) along the last axis."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return torch.sqrt(((a - b) ** 2).sum(dim=-1))


def squared_distance(a, b) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return ((a - b) ** 2).sum(dim=-1)


@dataclass(frozen=True)
class TripletBatch:
    triples: np.ndarray  # T x 3 int64: anchor, positive, negative

    def __len__(self) -> int:
        return len(self.triples)


def _label_codes(labels: Sequence) -> np.ndarray:
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.reshape(-1)


def sample_triplets(
    labels: Sequence,
    strategy: str = "all",
    embeddings: torch.Tensor | None = None,
    margin: float = DEFAULT_MARGIN,
) -> TripletBatch:
    """Enumerate (anchor, positive, negative) index triples over a batch.

    ``all`` keeps every valid triple. ``semi-hard`` keeps, per (a, p), the
    negatives with d(a,p) < d(a,n) < d(a,p) + margin, or the hardest negative
    when none falls in that band; it needs ``embeddings``.
    """
    codes = _label_codes(labels)
    same = codes[:, None] == codes[None, :]
    pos = same & ~np.eye(len(codes), dtype=bool)
    neg = ~same
    a_idx, p_idx = np.nonzero(pos)
    if strategy == "all":
        valid = pos[:, :, None] & neg[:, None, :]
        triples = np.argwhere(valid)
    elif strategy == "semi-hard":
        if embeddings is None:
            raise ConfigError("semi-hard mining needs embeddings")
        with torch.no_grad():
            d = torch.cdist(embeddings.double(), embeddings.double()).numpy()
        rows = []
        for a, p in zip(a_idx, p_idx):
            negs = np.nonzero(neg[a])[0]
            if len(negs) == 0:
                continue
            dan = d[a, negs]
            band = negs[(dan > d[a, p]) & (dan < d[a, p] + margin)]
            chosen = band if len(band) else negs[[np.argmin(dan)]]
            rows.extend((a, p, n) for n in chosen)
        triples = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    else:
        raise ConfigError(f"unknown triplet strategy {strategy!r}")
    if len(triples) == 0:
        raise EmptyTriplets(f"no valid triplets among {len(codes)} samples")
    return TripletBatch(triples.astype(np.int64))


def triplet_loss(embeddings: torch.Tensor, triplets: TripletBatch | np.ndarray, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Mean over triples of max(0, d(a,p)^2 - d(a,n)^2 + margin)."""
    if margin <= 0:
        raise ConfigError(f"margin must be > 0, got {margin}")
    t = triplets.triples if isinstance(triplets, TripletBatch) else np.asarray(triplets)
    if len(t) == 0:
        raise EmptyTriplets("empty triplet list")
    t = torch.as_tensor(t, dtype=torch.long)
    a, p, n = embeddings[t[:, 0]], embeddings[t[:, 1]], embeddings[t[:, 2]]
    return F.relu(squared_distance(a, p) - squared_distance(a, n) + margin).mean()


@dataclass(frozen=True)
class VerificationReport:
    thresholds: np.ndarray
    accuracies: np.ndarray
    best_threshold: float
    best_accuracy: float
    n_pairs: int

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.accuracies.tolist()))


def threshold_grid(spec=None) -> np.ndarray:
    """``None`` -> default grid; (start, stop, num) -> linspace; else explicit values."""
    if spec is None:
        spec = DEFAULT_THRESHOLDS
    if isinstance(spec, tuple) and len(spec) == 3 and isinstance(spec[2], int):
        return np.linspace(spec[0], spec[1], spec[2])
    return np.sort(np.asarray(spec, dtype=np.float64))


def verification_sweep(distances, same, thresholds=None) -> VerificationReport:
    """Predict 'same' iff distance < t, for each t; ties on accuracy go to the smallest t."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    y = np.asarray(same, dtype=bool).reshape(-1)
    if len(d) == 0 or len(d) != len(y):
        raise ConfigError("need a non-empty, aligned set of pair distances and labels")
    if y.all() or not y.any():
        raise ConfigError("verification needs at least one positive and one negative pair")
    t = threshold_grid(thresholds)
    acc = ((d[None, :] < t[:, None]) == y[None, :]).mean(axis=1)
    best = int(np.argmax(acc))  # first maximum == smallest threshold
    return VerificationReport(t, acc, float(t[best]), float(acc[best]), len(d))


def verify(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor, bool]] | tuple[torch.Tensor, torch.Tensor, Sequence[bool]],
    embedder: Embedder,
    thresholds=None,
) -> VerificationReport:
    """Threshold-sweep verification accuracy over image pairs.

    ``pairs`` is either a list of (image1, image2, same) with CHW tensors or a
    tuple of stacked (N x C x H x W, N x C x H x W, N labels).
    """
    if isinstance(pairs, tuple) and len(pairs) == 3 and torch.is_tensor(pairs[0]):
        x1, x2, same = pairs
    else:
        if not pairs:
            raise ConfigError("no pairs to verify")
        x1 = torch.stack([torch.as_tensor(p[0]) for p in pairs])
        x2 = torch.stack([torch.as_tensor(p[1]) for p in pairs])
        same = [bool(p[2]) for p in pairs]
    if len(x1) == 0:
        raise ConfigError("no pairs to verify")
    d = distance(embed(x1, embedder), embed(x2, embedder))
    return verification_sweep(d.numpy(), same, thresholds)
