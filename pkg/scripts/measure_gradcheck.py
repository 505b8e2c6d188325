"""Finite-difference agreement of the generator loss per hidden activation.

Central differences at h=1e-3 against float32 autograd, with the oracle in
float32 or float64, for ReLU, ELU and SiLU networks on the 16x16 toy config.

    python scripts/measure_gradcheck.py
"""
import numpy as np
import torch

from facegan.dataio import whiten
from facegan.generator import frozen_spectral_state
from facegan.gradcheck import check_gradients
from facegan.synthetic import synthetic_faces
from facegan.training import TrainConfig, build_bundle, generator_loss, synthesize, to_tensor


def main():
    x = to_tensor(np.stack([whiten(im).pixels for im in synthetic_faces(8, 2, 16, 1, seed=0)]))

    def loss(b, dtype):
        with frozen_spectral_state(b.generator):
            s = synthesize(b, x.to(dtype), noise_seed=7)
            return generator_loss(x.to(dtype), s.adversarial, s.masked_perturbation, b.embedder, b.config).total

    def params(b):
        return [(f"g.{n}", p) for n, p in b.generator.named_parameters()] + [
            (f"s.{n}", p) for n, p in b.saliency.named_parameters()
        ]

    for activation in ("relu", "elu", "silu"):
        for oracle in (torch.float32, torch.float64):
            bundle = build_bundle(TrainConfig(activation=activation), 16, 1)
            bundle.embedder.eval()
            errs = [s.rel_error for s in check_gradients(loss, bundle, params, n=10, oracle_dtype=oracle)]
            print(f"{activation:5s} oracle={str(oracle).split('.')[-1]:8s} max rel error {max(errs):.2e} median {np.median(errs):.2e}")


if __name__ == "__main__":
    main()
