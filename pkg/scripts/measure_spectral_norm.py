"""Accuracy of the top singular value after a few power-iteration steps.

Compares the block power iteration used by the generator's SN layers with
the single-vector method on random 64 x 576 conv weights.

    python scripts/measure_spectral_norm.py --draws 20 --steps 5
"""
import argparse

import torch
import torch.nn as nn

from facegan.generator import SpectralNorm


def single_vector(w, steps, seed):
    g = torch.Generator().manual_seed(seed)
    u = nn.functional.normalize(torch.randn(w.shape[0], generator=g), dim=0)
    for _ in range(steps):
        v = nn.functional.normalize(w.t() @ u, dim=0)
        u = nn.functional.normalize(w @ v, dim=0)
    return float(u @ w @ v)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--draws", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    worst_single = worst_block = 0.0
    for draw in range(args.draws):
        torch.manual_seed(draw)
        conv = nn.Conv2d(64, 64, 3)
        w = conv.weight.detach().reshape(64, -1)
        true = torch.linalg.matrix_norm(w, ord=2).item()
        sn = SpectralNorm(conv.weight.detach())
        sn.power_iterate(conv.weight.detach(), args.steps)
        worst_block = max(worst_block, abs(sn.sigma(conv.weight.detach()).item() / true - 1))
        worst_single = max(worst_single, abs(single_vector(w, args.steps, draw) / true - 1))
    print(f"max relative error after {args.steps} steps: single-vector {worst_single:.2e}, block {worst_block:.2e}")


if __name__ == "__main__":
    main()
