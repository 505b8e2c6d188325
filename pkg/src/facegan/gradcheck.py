"""Central finite-difference checks of autograd gradients on sampled parameters.

The gradient under test is computed by autograd in the model's own dtype
(float32). The finite-difference oracle differences the same function on a
float64 copy of the model: float32 loss values near 0.2 are quantized in
steps of ulp/2h ~ 7e-6 at h = 1e-3, coarser than 1% of typical weight
gradients, so a float32 oracle cannot resolve them.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
import torch
import torch.nn as nn

T = TypeVar("T")


@dataclass
class GradSample:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if denom == 0 else abs(self.analytic - self.numeric) / denom


def sample_coordinates(
    named_params: Sequence[tuple[str, torch.Tensor]], n: int, seed: int
) -> list[tuple[str, int]]:
    """``n`` distinct (parameter name, flat index) drawn uniformly over all scalars."""
    sizes = np.array([p.numel() for _, p in named_params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in sorted(flat):
        k = int(np.searchsorted(bounds, f, side="right"))
        out.append((named_params[k][0], int(f - (bounds[k - 1] if k else 0))))
    return out


def cast_model(model: T, dtype: torch.dtype) -> T:
    """Deep copy with every contained nn.Module cast to ``dtype``."""
    clone = copy.deepcopy(model)
    if isinstance(clone, nn.Module):
        return clone.to(dtype)
    if dataclasses.is_dataclass(clone):
        for f in dataclasses.fields(clone):
            value = getattr(clone, f.name)
            if isinstance(value, nn.Module):
                value.to(dtype)
        return clone
    raise TypeError(f"cannot cast {type(model).__name__}")


def check_gradients(
    loss_fn: Callable[[T, torch.dtype], torch.Tensor],
    model: T,
    params: Callable[[T], Sequence[tuple[str, torch.Tensor]]],
    n: int = 10,
    h: float = 1e-3,
    seed: int = 0,
    oracle_dtype: torch.dtype = torch.float64,
) -> list[GradSample]:
    """Autograd vs (L(w+h) - L(w-h)) / 2h on ``n`` random coordinates.

    ``loss_fn(model, dtype)`` must be a deterministic function of the
    parameters and cast its inputs to ``dtype``; ``params(model)`` lists the
    named parameters to sample from.
    """
    named = list(params(model))
    dtype = named[0][1].dtype
    loss = loss_fn(model, dtype)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    analytic = {name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(named, grads)}

    oracle = cast_model(model, oracle_dtype)
    oracle_params = dict(params(oracle))
    out = []
    with torch.no_grad():
        for name, i in sample_coordinates(named, n, seed):
            flat = oracle_params[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            lp = float(loss_fn(oracle, oracle_dtype))
            flat[i] = orig - h
            lm = float(loss_fn(oracle, oracle_dtype))
            flat[i] = orig
            out.append(GradSample(name, i, float(analytic[name].view(-1)[i]), (lp - lm) / (2 * h)))
    return out
