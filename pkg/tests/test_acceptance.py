"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Every test prints a ``PASS``/``FAIL criterion N`` line (collected again in the
terminal summary). Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""
import math
import time

import numpy as np
import pytest
import torch

from facegan.cli import main as cli_main
from facegan.dataio import FaceImage, scan_manifest, whiten
from facegan.discriminator import Embedder, distance, sample_triplets, triplet_loss
from facegan.evaluation import ExperimentSpec, compare_augmentation, evaluate_pairs, make_pairs
from facegan.generator import Generator, frozen_spectral_state, spectral_layers
from facegan.gradcheck import check_gradients
from facegan.saliency import SaliencyExtractor
from facegan.synthetic import synthetic_faces, write_dataset
from facegan.training import (
    CheckpointBundle,
    TrainConfig,
    build_bundle,
    frobenius_norm,
    generator_loss,
    synthesize,
    to_tensor,
    train,
)


def toy_split(seed, n_ids=8, n_train=20, n_test=10):
    per = n_train + n_test
    images = [whiten(im) for im in synthetic_faces(n_ids, per, 16, 1, seed=seed)]
    train_set = [im for k, im in enumerate(images) if k % per < n_train]
    test_set = [im for k, im in enumerate(images) if k % per >= n_train]
    return train_set, test_set


def test_criterion_1_shapes(criterion):
    with criterion(1, "shape suite for sizes 16/32/64/128") as c:
        start = time.perf_counter()
        failures = []
        torch.manual_seed(0)
        for channels in (1, 3):
            g, s = Generator(channels).eval(), SaliencyExtractor().eval()
            for size in (16, 32, 64, 128):
                with torch.no_grad():
                    x = torch.randn(2, channels, size, size)
                    z = g.encode(x)
                    p = g.decode(z)
                    m = s(z)
                ok = (
                    tuple(z.shape) == (2, 64, size // 4, size // 4)
                    and tuple(p.shape) == tuple(x.shape)
                    and p.abs().max() <= 1
                    and tuple(m.shape) == (2, 1, size, size)
                    and 0 <= m.min()
                    and m.max() <= 1
                )
                if not ok:
                    failures.append((channels, size))
        elapsed = time.perf_counter() - start
        c.check(not failures and elapsed < 10, f"failures={failures} runtime={elapsed:.1f}s<10s")
    assert c.passed, c.detail


def test_criterion_2_oracles(criterion):
    with criterion(2, "loop oracles for distance, triplet, Frobenius, MSE, accounting") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = dict(distance=0.0, triplet=0.0, frob=0.0, mse=0.0, accounting=0.0)
        emb = Embedder(1, dim=16, width=8).double()
        cfg = TrainConfig()
        for _ in range(100):
            a, b = rng.normal(size=(2, 16))
            d = distance(torch.from_numpy(a), torch.from_numpy(b)).item()
            worst["distance"] = max(worst["distance"], abs(d - math.sqrt(sum((u - v) ** 2 for u, v in zip(a, b)))))

            labels = list(rng.choice(list("ABC"), 6))
            if len(set(labels)) == 1:
                labels[0] = "Z" if labels[1] != "Z" else "Y"
            if max(labels.count(x) for x in set(labels)) < 2:
                labels[1] = labels[0]
            e = rng.normal(size=(6, 4))
            margin = float(rng.uniform(0.05, 1.0))
            trip = sample_triplets(labels)
            terms = []
            for ia, ip, ineg in trip.triples.tolist():
                dap = sum((e[ia][m] - e[ip][m]) ** 2 for m in range(4))
                dan = sum((e[ia][m] - e[ineg][m]) ** 2 for m in range(4))
                terms.append(max(0.0, dap - dan + margin))
            got = triplet_loss(torch.from_numpy(e), trip, margin).item()
            worst["triplet"] = max(worst["triplet"], abs(got - sum(terms) / len(terms)))

            x = rng.normal(size=(2, 1, 8, 8))
            mp = rng.uniform(-1, 1, size=(2, 1, 8, 8))
            x_adv = x + mp
            frob_loop = sum(math.sqrt(sum(v * v for v in sample.ravel())) for sample in mp) / 2
            mse_loop = sum((u - v) ** 2 for u, v in zip(x_adv.ravel(), x.ravel())) / x.size
            frob = frobenius_norm(torch.from_numpy(mp)).item()
            worst["frob"] = max(worst["frob"], abs(frob - frob_loop))
            t = generator_loss(torch.from_numpy(x), torch.from_numpy(x_adv), torch.from_numpy(mp), emb, cfg)
            worst["mse"] = max(worst["mse"], abs(t.mse.item() - mse_loop))
            total_loop = mse_loop + cfg.lambda_frob * frob_loop - cfg.lambda_adv * t.adv.item()
            worst["accounting"] = max(worst["accounting"], abs(t.total.item() - total_loop))
        elapsed = time.perf_counter() - start
        ok = all(worst[k] < 1e-9 for k in ("distance", "triplet", "frob", "mse")) and worst["accounting"] < 1e-6
        c.check(ok and elapsed < 10, f"max errors {', '.join(f'{k}={v:.1e}' for k, v in worst.items())} runtime={elapsed:.1f}s")
    assert c.passed, c.detail


def test_criterion_3_gradients(criterion):
    with criterion(3, "finite differences vs autograd, generator and triplet loss") as c:
        start = time.perf_counter()
        cfg = TrainConfig(seed=0)
        train_set, _ = toy_split(0, n_train=2, n_test=0)
        x = to_tensor(np.stack([im.pixels for im in train_set]))
        labels = [im.identity for im in train_set]
        bundle = build_bundle(cfg, 16, 1)
        bundle.embedder.eval()

        def gen_loss(b, dtype):
            with frozen_spectral_state(b.generator):
                s = synthesize(b, x.to(dtype), noise_seed=7)
                return generator_loss(x.to(dtype), s.adversarial, s.masked_perturbation, b.embedder, b.config).total

        def gen_params(b):
            return [(f"g.{n}", p) for n, p in b.generator.named_parameters()] + [
                (f"s.{n}", p) for n, p in b.saliency.named_parameters()
            ]

        gen = check_gradients(gen_loss, bundle, gen_params, n=10, h=1e-3, seed=0)

        emb = build_bundle(cfg, 16, 1).embedder.train()
        trip = sample_triplets(labels)

        def trip_loss(model, dtype):
            return triplet_loss(model(x.to(dtype)), trip, cfg.margin)

        tri = check_gradients(trip_loss, emb, lambda m: list(m.named_parameters()), n=10, h=1e-3, seed=0)
        elapsed = time.perf_counter() - start
        g_err = max(s.rel_error for s in gen)
        t_err = max(s.rel_error for s in tri)
        dtypes = {p.dtype for _, p in gen_params(bundle)} | {p.dtype for p in emb.parameters()}
        c.check(
            g_err < 1e-2 and t_err < 1e-2 and dtypes == {torch.float32} and elapsed < 60,
            f"max rel error generator={g_err:.1e} triplet={t_err:.1e} (float32 autograd) runtime={elapsed:.1f}s",
        )
    assert c.passed, c.detail


def test_criterion_4_whitening(criterion):
    with criterion(4, "whitening statistics") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(4)
        worst_mean = worst_var = 0.0
        for i in range(1000):
            size = int(rng.choice([8, 16, 32]))
            channels = int(rng.choice([1, 3]))
            px = rng.uniform(0, 1, size=(size, size, channels)) ** rng.uniform(0.2, 5)
            out = whiten(FaceImage(px, "a")).pixels
            worst_mean = max(worst_mean, abs(out.mean()))
            worst_var = max(worst_var, abs(out.var() - 1))
        const = whiten(FaceImage(np.full((16, 16, 3), 0.37), "a")).pixels
        elapsed = time.perf_counter() - start
        c.check(
            worst_mean < 1e-6 and worst_var < 1e-4 and np.all(const == 0) and elapsed < 5,
            f"max|mean|={worst_mean:.1e} max|var-1|={worst_var:.1e} constant->zeros={bool(np.all(const == 0))} runtime={elapsed:.1f}s",
        )
    assert c.passed, c.detail


def test_criterion_5_spectral_norm(criterion):
    with criterion(5, "spectral norm within 1e-2 of 1 after 5 steps") as c:
        start = time.perf_counter()
        worst = 0.0
        for draw in range(20):
            torch.manual_seed(draw)
            g = Generator(3).train()
            x = torch.randn(2, 3, 16, 16)
            with torch.no_grad():
                for _ in range(5):  # one power-iteration step per training forward
                    g.encode(x)
                for module, _ in spectral_layers(g):
                    w = module.weight.reshape(module.weight.shape[0], -1)
                    worst = max(worst, abs(torch.linalg.matrix_norm(w, ord=2).item() - 1))
        elapsed = time.perf_counter() - start
        c.check(worst < 1e-2 and elapsed < 10, f"max|sigma-1|={worst:.1e} over 20 draws x 3 layers runtime={elapsed:.1f}s")
    assert c.passed, c.detail


def test_criterion_6_toy_end_to_end(criterion):
    with criterion(6, "toy end-to-end, 5 seeds") as c:
        start = time.perf_counter()
        accs, ratios = [], []
        for seed in range(5):
            train_set, test_set = toy_split(100 + seed)
            bundle, log = train(train_set, TrainConfig(epochs=30, seed=seed))
            accs.append(evaluate_pairs(make_pairs(test_set, seed=0), bundle.embedder).best_accuracy)
            ratios.append(log.epoch_mean("disc_loss", 29) / log.epoch_mean("disc_loss", 0))
        elapsed = time.perf_counter() - start
        wins = sum(a >= 0.85 for a in accs)
        c.check(
            wins >= 4 and all(r < 0.5 for r in ratios) and elapsed < 600,
            f"accuracies={[round(a, 3) for a in accs]} (>=0.85 in {wins}/5) "
            f"disc final/first={[round(r, 3) for r in ratios]} runtime={elapsed:.0f}s",
        )
    assert c.passed, c.detail


def test_criterion_7_augmentation_benefit(criterion):
    with criterion(7, "augmentation benefit, 3-shot split, k=50, 5 seeds") as c:
        start = time.perf_counter()
        train_set, test_set = toy_split(7, n_train=3, n_test=10)
        spec = ExperimentSpec(train_set, make_pairs(test_set, seed=0), TrainConfig(epochs=30, noise_scale=0.1), 50, range(5))
        rep = compare_augmentation(spec)
        elapsed = time.perf_counter() - start
        c.check(
            rep.mean_difference >= 0 and rep.b_wins_or_ties >= 3 and elapsed < 1800,
            f"A={np.round(rep.accuracies('A'), 3).tolist()} B={np.round(rep.accuracies('B'), 3).tolist()} "
            f"mean(B-A)={rep.mean_difference:+.4f} B wins/ties {rep.b_wins_or_ties}/5 runtime={elapsed:.0f}s",
        )
    assert c.passed, c.detail


def test_criterion_8_expansion_ratio(criterion, tmp_path):
    with criterion(8, "augment --k 100 on 50 images emits 5000 labeled files") as c:
        start = time.perf_counter()
        images = synthetic_faces(5, 10, 16, 1, seed=8)
        write_dataset(images, tmp_path / "data", sidecar=True)
        build_bundle(TrainConfig(), 16, 1).save(tmp_path / "checkpoint.pt")
        code = cli_main(["augment", "--data", str(tmp_path / "data"), "--checkpoint", str(tmp_path / "checkpoint.pt"),
                         "--k", "100", "--seed", "0", "--out", str(tmp_path / "aug")])
        files = [p for p in (tmp_path / "aug").rglob("*.png")]
        manifest = scan_manifest(tmp_path / "aug", 16)
        labels_ok = all(e.path.split("/")[0] == e.identity for e in manifest.entries)
        per_id = manifest.counts()
        elapsed = time.perf_counter() - start
        c.check(
            code == 0 and len(files) == 5000 and len(manifest) == 5000 and labels_ok
            and per_id == {f"id{i:03d}": 1000 for i in range(5)} and elapsed < 60,
            f"exit={code} files={len(files)} manifest={len(manifest)} (expected 100*50=5000) runtime={elapsed:.1f}s",
        )
    assert c.passed, c.detail


def test_criterion_9_determinism_and_resume(criterion, tmp_path):
    with criterion(9, "determinism and checkpoint resume") as c:
        start = time.perf_counter()
        train_set, _ = toy_split(9, n_train=6, n_test=0)  # 48 images -> 3 batches per epoch
        cfg = TrainConfig(epochs=3, seed=5)
        cols = ("gen_loss", "disc_loss", "mse_term", "frob_term", "adv_term")

        _, log_a = train(train_set, cfg)
        _, log_b = train(train_set, cfg)
        rerun = max(float(np.max(np.abs(log_a.column(k) - log_b.column(k)))) for k in cols)

        first, log_1 = train(train_set, cfg, max_steps=4)  # stops inside epoch 1
        first.save(tmp_path / "mid.pt")
        resumed, log_2 = train(train_set, cfg, resume=CheckpointBundle.load(tmp_path / "mid.pt"))
        steps = [r.step for r in log_1.records + log_2.records]
        joined = {k: np.array([getattr(r, k) for r in log_1.records + log_2.records]) for k in cols}
        resume_err = max(float(np.max(np.abs(joined[k] - log_a.column(k)))) for k in cols)
        next_err = max(abs(getattr(log_2.records[0], k) - getattr(log_a.records[4], k)) for k in cols)
        elapsed = time.perf_counter() - start
        c.check(
            len(log_a.records) == 9 and steps == list(range(1, 10)) and rerun <= 1e-6
            and resume_err <= 1e-6 and next_err <= 1e-6 and elapsed < 120,
            f"rerun max diff={rerun:.1e} resumed next-step diff={next_err:.1e} whole-run diff={resume_err:.1e} "
            f"(resumed at epoch {first.epoch} batch {first.batch_index}) runtime={elapsed:.1f}s",
        )
    assert c.passed, c.detail


def test_criterion_10_frobenius_pressure(criterion):
    with criterion(10, "lambda_frob x100 shrinks final-epoch ||s*p||_F") as c:
        start = time.perf_counter()
        train_set, _ = toy_split(10, n_test=0)
        base = TrainConfig(epochs=30, seed=0)
        _, log_base = train(train_set, base)
        _, log_high = train(train_set, base.replace(lambda_frob=100 * base.lambda_frob))
        f_base = log_base.epoch_mean("frob_term", 29)
        f_high = log_high.epoch_mean("frob_term", 29)
        elapsed = time.perf_counter() - start
        c.check(f_high < f_base and elapsed < 600,
                f"final-epoch mean frob baseline={f_base:.4f} x100={f_high:.4f} runtime={elapsed:.0f}s")
    assert c.passed, c.detail


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
