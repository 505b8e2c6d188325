"""Evaluation protocols: pair verification, minimum gallery size, A/B augmentation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataio import DatasetManifest, FaceImage, load_and_crop, load_dataset, whiten
from .discriminator import Embedder, VerificationReport, distance, embed, verification_sweep
from .errors import ConfigError
from .training import TrainConfig, augment, to_tensor, train

log = logging.getLogger(__name__)

Pair = tuple[FaceImage, FaceImage, bool]


def read_pairs_file(path: Path | str) -> list[tuple[str, str, bool]]:
    """``path1<TAB>path2<TAB>{0|1}`` per line."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[2].strip() not in ("0", "1"):
            raise ConfigError(f"{path}:{lineno}: expected path1<TAB>path2<TAB>0|1")
        out.append((cols[0], cols[1], cols[2].strip() == "1"))
    if not out:
        raise ConfigError(f"{path}: no pairs")
    return out


def write_pairs_file(pairs: Sequence[tuple[str, str, bool]], path: Path | str) -> Path:
    path = Path(path)
    path.write_text("".join(f"{a}\t{b}\t{int(s)}\n" for a, b, s in pairs))
    return path


def load_pairs(path: Path | str, root: Path | str | None, canonical_size: int) -> list[Pair]:
    """Load and whiten both images of every pair; relative paths resolve against ``root``."""
    root = Path(root) if root is not None else Path(path).parent
    cache: dict[str, FaceImage] = {}

    def get(p: str) -> FaceImage:
        if p not in cache:
            full = Path(p) if Path(p).is_absolute() else root / p
            img = whiten(load_and_crop(full, canonical_size, identity=Path(p).parent.name))
            cache[p] = replace(img, source_path=str(full.resolve()))
        return cache[p]

    return [(get(a), get(b), s) for a, b, s in read_pairs_file(path)]


def make_pairs(images: Sequence[FaceImage], seed: int = 0, max_positive: int | None = None) -> list[Pair]:
    """Balanced pair set: every same-identity pair (up to ``max_positive``)
    plus an equal number of random different-identity pairs."""
    labels = np.array([im.identity for im in images])
    i, j = np.triu_indices(len(images), 1)
    same = labels[i] == labels[j]
    rng = np.random.default_rng(seed)
    pos = np.nonzero(same)[0]
    if max_positive is not None and len(pos) > max_positive:
        pos = rng.choice(pos, max_positive, replace=False)
    neg_pool = np.nonzero(~same)[0]
    if len(pos) == 0 or len(neg_pool) == 0:
        raise ConfigError("need at least one positive and one negative pair")
    neg = rng.choice(neg_pool, min(len(pos), len(neg_pool)), replace=False)
    sel = np.concatenate([pos, neg])
    return [(images[i[s]], images[j[s]], bool(same[s])) for s in sel]


def pair_distances(pairs: Sequence[Pair], embedder: Embedder) -> tuple[np.ndarray, np.ndarray]:
    uniq: dict[int, int] = {}
    stack = []
    for a, b, _ in pairs:
        for im in (a, b):
            if id(im) not in uniq:
                uniq[id(im)] = len(stack)
                stack.append(im.pixels)
    e = embed(to_tensor(np.stack(stack)), embedder)
    ia = torch.tensor([uniq[id(a)] for a, _, _ in pairs])
    ib = torch.tensor([uniq[id(b)] for _, b, _ in pairs])
    d = distance(e[ia], e[ib]).numpy()
    return d, np.array([s for _, _, s in pairs], dtype=bool)


def evaluate_pairs(pairs: Sequence[Pair], embedder: Embedder, thresholds=None) -> VerificationReport:
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    d, same = pair_distances(pairs, embedder)
    return verification_sweep(d, same, thresholds)


def write_verification(report: VerificationReport, out_dir: Path | str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = out / "verification.csv"
    with rows.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "accuracy"])
        w.writerows((f"{t:.6g}", repr(a)) for t, a in report.rows())
    summary = out / "verification_summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["best_threshold", "best_accuracy", "n_pairs"])
        w.writerow([f"{report.best_threshold:.6g}", repr(report.best_accuracy), report.n_pairs])
    return rows, summary


UNREACHED = None


@dataclass
class MinImagesReport:
    per_identity: dict[str, int | None]
    aggregate: int | None
    target_accuracy: float
    curve: list[tuple[int, float]] = field(default_factory=list)

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["identity", "k_star", "target_accuracy"])
            for ident, k in sorted(self.per_identity.items()):
                w.writerow([ident, "unreached" if k is None else k, self.target_accuracy])
            w.writerow(["ALL", "unreached" if self.aggregate is None else self.aggregate, self.target_accuracy])
        return path


def min_images_from_embeddings(
    embeddings, labels: Sequence[str], target_accuracy: float = 0.95, seed: int = 0
) -> MinImagesReport:
    """Smallest per-identity gallery size reaching ``target_accuracy`` rank-1.

    For k = 1, 2, ... each identity enrolls the first k images of a seeded
    permutation (galleries are nested in k); every remaining image is
    classified by the nearest mean gallery embedding. An identity's k* is the
    first k at which its own probes reach the target; the aggregate is the
    worst case over identities.
    """
    if not 0 < target_accuracy <= 1:
        raise ConfigError(f"target_accuracy must be in (0, 1], got {target_accuracy}")
    e = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
    labels = np.asarray(labels)
    idents = sorted(set(labels.tolist()))
    rng = np.random.default_rng(seed)
    perms = {c: rng.permutation(np.nonzero(labels == c)[0]) for c in idents}
    counts = [len(p) for p in perms.values()]
    if min(counts) < 2:
        raise ConfigError("every identity needs >= 2 images")
    k_star: dict[str, int | None] = {c: None for c in idents}
    curve = []
    for k in range(1, min(counts)):
        centers = torch.stack([e[perms[c][:k]].mean(dim=0) for c in idents])
        correct_total, n_total = 0, 0
        for ci, c in enumerate(idents):
            probes = perms[c][k:]
            pred = torch.cdist(e[probes], centers).argmin(dim=1)
            correct = int((pred == ci).sum())
            correct_total += correct
            n_total += len(probes)
            if k_star[c] is None and correct / len(probes) >= target_accuracy:
                k_star[c] = k
        curve.append((k, correct_total / n_total))
    agg = None if any(v is None for v in k_star.values()) else max(k_star.values())
    return MinImagesReport(k_star, agg, target_accuracy, curve)


def min_images(
    data: DatasetManifest | Sequence[FaceImage],
    embedder: Embedder,
    target_accuracy: float = 0.95,
    seed: int = 0,
) -> MinImagesReport:
    images = load_dataset(data) if isinstance(data, DatasetManifest) else list(data)
    e = embed(to_tensor(np.stack([im.pixels for im in images])), embedder)
    return min_images_from_embeddings(e, [im.identity for im in images], target_accuracy, seed)


@dataclass
class ExperimentSpec:
    train: DatasetManifest | Sequence[FaceImage]
    eval_pairs: Sequence[Pair]
    config: TrainConfig
    k: int
    seeds: Sequence[int]
    out_dir: Path | None = None
    _images: list[FaceImage] | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        train_paths = {im.source_path for im in self.train_images()}
        eval_paths = {im.source_path for a, b, _ in self.eval_pairs for im in (a, b)}
        overlap = train_paths & eval_paths
        if overlap:
            raise ConfigError(f"train and eval data overlap on {len(overlap)} paths, e.g. {sorted(overlap)[0]}")

    def train_images(self) -> list[FaceImage]:
        """Training images; manifest entries are keyed by resolved absolute path."""
        if self._images is None:
            if isinstance(self.train, DatasetManifest):
                root = Path(self.train.root)
                self._images = [
                    replace(im, source_path=str((root / im.source_path).resolve()))
                    for im in load_dataset(self.train)
                ]
            else:
                self._images = list(self.train)
        return self._images


@dataclass
class ComparisonRow:
    seed: int
    arm: str
    accuracy: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    k: int

    def accuracies(self, arm: str) -> np.ndarray:
        return np.array([r.accuracy for r in self.rows if r.arm == arm])

    @property
    def mean_difference(self) -> float:
        return float(np.mean(self.accuracies("B") - self.accuracies("A")))

    @property
    def b_wins_or_ties(self) -> int:
        return int(np.sum(self.accuracies("B") >= self.accuracies("A")))

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "arm", "accuracy"])
            for r in self.rows:
                w.writerow([r.seed, r.arm, repr(r.accuracy)])
            w.writerow(["mean", "B-A", repr(self.mean_difference)])
        return path


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Embedder-only training: no generator, no adversarial term."""
    return cfg.replace(use_generator=False, lambda_adv=0.0)


def compare_augmentation(spec: ExperimentSpec) -> ComparisonReport:
    """Arm A trains the embedder on the low-shot split alone. Arm B trains the
    full game on the split, augments it k-fold with the trained generator, and
    trains a fresh embedder with the same hyperparameters on real + generated
    images. With k = 0 arm B is arm A."""
    images = spec.train_images()
    rows = []
    for seed in spec.seeds:
        cfg = spec.config.replace(seed=int(seed))
        base = baseline_config(cfg)
        emb_a, _ = train(images, base)
        acc_a = evaluate_pairs(spec.eval_pairs, emb_a.embedder).best_accuracy
        if spec.k == 0:
            emb_b, _ = train(images, base)
        else:
            gan, _ = train(images, cfg)
            aug = augment(images, gan, spec.k, seed=int(seed))
            emb_b, _ = train(list(images) + [whiten(im) for im in aug.images], base)
        acc_b = evaluate_pairs(spec.eval_pairs, emb_b.embedder).best_accuracy
        log.info("seed %s: A=%.4f B=%.4f", seed, acc_a, acc_b)
        rows += [ComparisonRow(int(seed), "A", acc_a), ComparisonRow(int(seed), "B", acc_b)]
    report = ComparisonReport(rows, spec.k)
    if spec.out_dir is not None:
        Path(spec.out_dir).mkdir(parents=True, exist_ok=True)
        report.to_csv(Path(spec.out_dir) / "comparison.csv")
    return report
