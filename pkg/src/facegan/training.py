"""The adversarial training game, run logging, checkpoints and augmentation.

Per batch: the generator (with latent noise) and the saliency extractor
produce x_adv = clamp(x + s * p); the embedder takes one triplet-loss step on
real plus generated samples (generated samples keep their source identity),
then the generator and extractor take one step on

    MSE(x_adv, x) + lambda_frob * ||s * p||_F - lambda_adv * d(e(x_adv), e(x))^2

with the embedder frozen.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataio import (
    DatasetManifest,
    FaceImage,
    ManifestEntry,
    batches,
    dewhiten,
    load_dataset,
    write_manifest,
)
from .discriminator import Embedder, sample_triplets, squared_distance, triplet_loss
from .errors import ConfigError, EmptyTriplets, NumericalError
from .generator import Generator, perturb_latent
from .saliency import SaliencyExtractor, compose_adversarial

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
RUNLOG_HEADER = ("step", "epoch", "gen_loss", "disc_loss", "mse_term", "frob_term", "adv_term")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    epochs: int = 100
    margin: float = 0.2
    lambda_frob: float = 1e-3
    lambda_adv: float = 0.1
    noise_scale: float = 0.1
    seed: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    disc_steps: int = 1
    gen_steps: int = 1
    triplet_strategy: str = "semi-hard"
    use_generator: bool = True
    embedding_dim: int = 128
    embedder_blocks: int = 4
    embedder_reductions: int = 3
    embedder_width: int = 32
    embedder_block: str = "inception"
    generator_res_blocks: int = 6
    activation: str = "silu"
    clip_lo: float = -3.0
    clip_hi: float = 3.0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.margin <= 0:
            raise ConfigError("learning_rate and margin must be > 0")
        if min(self.lambda_frob, self.lambda_adv, self.noise_scale) < 0:
            raise ConfigError("lambda_frob, lambda_adv and noise_scale must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer decay rates must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.disc_steps < 1 or self.gen_steps < 1:
            raise ConfigError("disc_steps and gen_steps must be >= 1")
        if self.triplet_strategy not in ("all", "semi-hard"):
            raise ConfigError(f"unknown triplet strategy {self.triplet_strategy!r}")
        if self.clip_lo >= self.clip_hi:
            raise ConfigError("clip_lo must be below clip_hi")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Path | str) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix in (".yaml", ".yml"):
                import yaml

                data = yaml.safe_load(text) or {}
            else:
                data = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping of config fields")
        return cls.from_dict(data)

    def to_file(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class StepRecord:
    step: int
    epoch: int
    gen_loss: float
    disc_loss: float
    mse_term: float
    frob_term: float
    adv_term: float
    wall_time: float = 0.0

    def row(self) -> list:
        return [getattr(self, k) for k in RUNLOG_HEADER]


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("step index must increase")
        vals = (rec.gen_loss, rec.disc_loss, rec.mse_term, rec.frob_term, rec.adv_term)
        if not all(np.isfinite(vals)):
            self.events.append({"kind": "non-finite", "step": rec.step, "values": list(map(float, vals))})
            raise NumericalError(f"non-finite loss at step {rec.step}: {vals}")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def epoch_mean(self, name: str, epoch: int) -> float:
        vals = [getattr(r, name) for r in self.records if r.epoch == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_HEADER)
            for r in self.records:
                w.writerow([r.step, r.epoch] + [repr(float(v)) for v in r.row()[2:]])
        return path

    @classmethod
    def from_csv(cls, path: Path | str) -> "RunLog":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != RUNLOG_HEADER:
                raise ValueError(f"{path}: header must be {','.join(RUNLOG_HEADER)}")
            out = cls()
            for row in reader:
                out.records.append(StepRecord(int(row[0]), int(row[1]), *map(float, row[2:])))
        return out


@dataclass
class LossTerms:
    total: torch.Tensor
    mse: torch.Tensor
    frob: torch.Tensor
    adv: torch.Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return tuple(float(v.detach()) for v in (self.total, self.mse, self.frob, self.adv))


@dataclass
class Synthesis:
    features: torch.Tensor
    perturbation: torch.Tensor
    saliency: torch.Tensor
    adversarial: torch.Tensor

    @property
    def masked_perturbation(self) -> torch.Tensor:
        return self.saliency * self.perturbation


@dataclass
class CheckpointBundle:
    generator: Generator
    saliency: SaliencyExtractor
    embedder: Embedder
    gen_optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer
    config: TrainConfig
    image_size: int
    in_channels: int
    step: int = 0
    epoch: int = 0
    batch_index: int = 0

    def architecture(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "generator": self.generator.architecture(),
            "saliency": {k: list(v.shape) for k, v in self.saliency.state_dict().items()},
            "embedder": self.embedder.architecture(),
        }

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT,
                "config": self.config.to_dict(),
                "config_hash": self.config.hash,
                "architecture": self.architecture(),
                "position": {"step": self.step, "epoch": self.epoch, "batch_index": self.batch_index},
                "generator": self.generator.state_dict(),
                "saliency": self.saliency.state_dict(),
                "embedder": self.embedder.state_dict(),
                "gen_optimizer": self.gen_optimizer.state_dict(),
                "disc_optimizer": self.disc_optimizer.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: Path | str) -> "CheckpointBundle":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        if blob.get("format_version") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
        cfg = TrainConfig.from_dict(blob["config"])
        if cfg.hash != blob["config_hash"]:
            raise ConfigError(f"{path}: config hash mismatch")
        arch = blob["architecture"]
        bundle = build_bundle(cfg, arch["image_size"], arch["in_channels"])
        if bundle.architecture() != arch:
            raise ConfigError(f"{path}: stored architecture does not match the config")
        bundle.generator.load_state_dict(blob["generator"])
        bundle.saliency.load_state_dict(blob["saliency"])
        bundle.embedder.load_state_dict(blob["embedder"])
        bundle.gen_optimizer.load_state_dict(blob["gen_optimizer"])
        bundle.disc_optimizer.load_state_dict(blob["disc_optimizer"])
        pos = blob["position"]
        bundle.step, bundle.epoch, bundle.batch_index = pos["step"], pos["epoch"], pos["batch_index"]
        return bundle


def build_bundle(cfg: TrainConfig, image_size: int, in_channels: int) -> CheckpointBundle:
    """Fresh models and optimizers, initialized from ``cfg.seed``."""
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    gen = Generator(in_channels, cfg.generator_res_blocks, activation=cfg.activation)
    sal = SaliencyExtractor(activation=cfg.activation)
    emb = Embedder(
        in_channels,
        cfg.embedding_dim,
        cfg.embedder_blocks,
        cfg.embedder_reductions,
        cfg.embedder_width,
        cfg.embedder_block,
        activation=cfg.activation,
    )
    betas = (cfg.beta1, cfg.beta2)
    gen_opt = torch.optim.Adam(list(gen.parameters()) + list(sal.parameters()), lr=cfg.learning_rate, betas=betas)
    disc_opt = torch.optim.Adam(emb.parameters(), lr=cfg.learning_rate, betas=betas)
    return CheckpointBundle(gen, sal, emb, gen_opt, disc_opt, cfg, image_size, in_channels)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C numpy -> N x C x H x W float32 tensor."""
    return torch.from_numpy(np.array(np.asarray(images).transpose(0, 3, 1, 2), dtype=np.float32, copy=True))


def from_tensor(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def synthesize(bundle: CheckpointBundle, x: torch.Tensor, noise_seed: int | None = None, noise_scale: float | None = None) -> Synthesis:
    scale = bundle.config.noise_scale if noise_scale is None else noise_scale
    z = bundle.generator.encode(x)
    noisy = perturb_latent(z, scale, noise_seed) if scale > 0 else z
    p = bundle.generator.decode(noisy)
    s = bundle.saliency(z)
    x_adv = compose_adversarial(x, p, s, (bundle.config.clip_lo, bundle.config.clip_hi))
    return Synthesis(z, p, s, x_adv)


def frobenius_norm(maps: torch.Tensor) -> torch.Tensor:
    """Per-sample ||.||_F over C x H x W, averaged over the batch."""
    return torch.linalg.vector_norm(maps.flatten(1), dim=1).mean()


def generator_loss(
    x: torch.Tensor,
    x_adv: torch.Tensor,
    masked_perturbation: torch.Tensor,
    embedder: Embedder,
    cfg: TrainConfig,
) -> LossTerms:
    """Reconstruction + perturbation-size penalty - embedding push-away.

    Returned ``frob`` and ``adv`` are the raw terms; ``total`` applies the
    weights. The embedder runs on frozen running statistics.
    """
    mse = F.mse_loss(x_adv, x)
    frob = frobenius_norm(masked_perturbation)
    if cfg.lambda_adv > 0:
        was_training = embedder.training
        embedder.eval()
        try:
            with torch.no_grad():
                e_x = embedder(x)
            adv = squared_distance(embedder(x_adv), e_x).mean()
        finally:
            embedder.train(was_training)
    else:
        adv = torch.zeros((), dtype=x.dtype)
    total = mse + cfg.lambda_frob * frob - cfg.lambda_adv * adv
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite generator loss (mse={mse}, frob={frob}, adv={adv})")
    return LossTerms(total, mse, frob, adv)


def discriminator_step(
    bundle: CheckpointBundle,
    x: torch.Tensor,
    labels: Sequence[str],
    generated: torch.Tensor | None = None,
) -> float:
    """One optimizer step of triplet loss on real (+ generated) samples.

    Generated samples carry their source labels. Returns the pre-step loss;
    raises EmptyTriplets when the union has no valid triple.
    """
    cfg = bundle.config
    if generated is not None:
        x = torch.cat([x, generated.detach()])
        labels = list(labels) + list(labels)
    emb = bundle.embedder
    emb.train()
    e = emb(x)
    trip = sample_triplets(labels, cfg.triplet_strategy, e.detach(), cfg.margin)
    loss = triplet_loss(e, trip, cfg.margin)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite triplet loss {float(loss)}")
    bundle.disc_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    bundle.disc_optimizer.step()
    return float(loss.detach())


def generator_step(
    bundle: CheckpointBundle,
    x: torch.Tensor,
    noise_seed: int | None = None,
    synth: Synthesis | None = None,
) -> tuple[float, float, float, float]:
    """One joint optimizer step of generator + saliency; embedder untouched.

    Returns (total, mse, frob, adv) evaluated before the step.
    """
    emb = bundle.embedder
    flags = [p.requires_grad for p in emb.parameters()]
    for p in emb.parameters():
        p.requires_grad_(False)
    try:
        if synth is None:
            bundle.generator.train()
            bundle.saliency.train()
            synth = synthesize(bundle, x, noise_seed)
        terms = generator_loss(x, synth.adversarial, synth.masked_perturbation, emb, bundle.config)
        bundle.gen_optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        bundle.gen_optimizer.step()
    finally:
        for p, f in zip(emb.parameters(), flags):
            p.requires_grad_(f)
    return terms.floats()


def check_trainable(images: Sequence[FaceImage]) -> None:
    counts: dict[str, int] = {}
    for im in images:
        counts[im.identity] = counts.get(im.identity, 0) + 1
    if len(counts) < 2 or max(counts.values()) < 2:
        raise ConfigError(
            "triplet training needs >= 2 identities and >= 1 identity with >= 2 images; "
            f"got {len(counts)} identities, max {max(counts.values(), default=0)} images"
        )


def _as_images(data: DatasetManifest | Sequence[FaceImage]) -> list[FaceImage]:
    if isinstance(data, DatasetManifest):
        return load_dataset(data)
    return list(data)


def train(
    data: DatasetManifest | Sequence[FaceImage],
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    resume: CheckpointBundle | None = None,
    max_steps: int | None = None,
    eval_fn: Callable[[CheckpointBundle], float] | None = None,
    runlog: RunLog | None = None,
) -> tuple[CheckpointBundle, RunLog]:
    """Run the alternating game; ``data`` must already be whitened if a sequence.

    Checkpoints (``checkpoint.pt``) and the run log are written to ``out_dir``
    after every epoch. ``max_steps`` stops early after that many total steps
    (used to split a run for resume checks). ``eval_fn`` is called after each
    epoch and its value appended to ``runlog.accuracy``.
    """
    images = _as_images(data)
    check_trainable(images)
    size, channels = images[0].size, images[0].channels
    if any(im.size != size or im.channels != channels for im in images):
        raise ConfigError("all training images must share size and channel count")
    if resume is not None:
        bundle = resume
        if bundle.config.hash != cfg.hash:
            raise ConfigError("resume checkpoint was trained with a different config")
    else:
        bundle = build_bundle(cfg, size, channels)
    if cfg.deterministic:
        torch.set_num_threads(1)
    runlog = runlog if runlog is not None else RunLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    try:
        for epoch in range(bundle.epoch, cfg.epochs):
            start = bundle.batch_index if epoch == bundle.epoch else 0
            for bi, batch in enumerate(batches(images, cfg.batch_size, cfg.seed, epoch)):
                if bi < start:
                    continue
                if max_steps is not None and bundle.step >= max_steps:
                    return bundle, runlog
                _train_batch(bundle, batch, epoch, bi, runlog)
                bundle.batch_index = bi + 1
            bundle.epoch, bundle.batch_index = epoch + 1, 0
            if eval_fn is not None:
                runlog.accuracy.append((epoch, float(eval_fn(bundle))))
            if out is not None:
                bundle.save(out / "checkpoint.pt")
                runlog.to_csv(out / "runlog.csv")
    except NumericalError as exc:
        runlog.events.append({"kind": "abort", "step": bundle.step, "error": str(exc)})
        if out is not None:
            bundle.save(out / "checkpoint_failed.pt")
            runlog.to_csv(out / "runlog.csv")
            _write_events(runlog, out)
        raise
    if out is not None:
        bundle.save(out / "checkpoint.pt")
        runlog.to_csv(out / "runlog.csv")
        _write_events(runlog, out)
    return bundle, runlog


def _write_events(runlog: RunLog, out: Path) -> None:
    (out / "events.json").write_text(json.dumps(runlog.events, indent=2))
    if runlog.accuracy:
        with (out / "accuracy.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "accuracy"])
            w.writerows(runlog.accuracy)


def _train_batch(bundle: CheckpointBundle, batch, epoch: int, bi: int, runlog: RunLog) -> None:
    cfg = bundle.config
    x = to_tensor(batch.images)
    labels = list(batch.identities)
    noise_seed = mix_seed(cfg.seed, epoch, bi)
    synth = None
    if cfg.use_generator:
        bundle.generator.train()
        bundle.saliency.train()
        synth = synthesize(bundle, x, noise_seed)
    try:
        for _ in range(cfg.disc_steps):
            disc = discriminator_step(bundle, x, labels, synth.adversarial if synth is not None else None)
    except EmptyTriplets:
        runlog.events.append({"kind": "skipped", "epoch": epoch, "batch": bi, "reason": "no valid triplets"})
        return
    if synth is not None:
        g = generator_step(bundle, x, noise_seed, synth)
        for _ in range(cfg.gen_steps - 1):
            g = generator_step(bundle, x, noise_seed)
    else:
        g = (0.0, 0.0, 0.0, 0.0)
    bundle.step += 1
    runlog.append(StepRecord(bundle.step, epoch, g[0], disc, g[1], g[2], g[3], time.time()))


@dataclass
class AugmentResult:
    images: list[FaceImage]  # de-whitened, values in [0, 1]
    saliency: list[np.ndarray]
    manifest: DatasetManifest | None = None


@torch.no_grad()
def augment(
    data: DatasetManifest | Sequence[FaceImage],
    bundle: CheckpointBundle,
    k: int,
    seed: int,
    out_dir: Path | str | None = None,
    overwrite: bool = False,
    noise_scale: float | None = None,
    save_saliency: bool = False,
) -> AugmentResult:
    """Emit k variants per input via independent latent-noise draws.

    Variants are composed in whitened space, mapped back to [0, 1] with each
    source image's own statistics and, if ``out_dir`` is given, written as
    ``<out>/<identity>/<stem>__augNNN.png`` with a sidecar manifest.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    images = _as_images(data)
    out = Path(out_dir) if out_dir is not None else None
    targets: list[str] = []
    if out is not None:
        for i, im in enumerate(images):
            stem = Path(im.source_path).stem or f"img{i:06d}"
            targets += [f"{im.identity}/{stem}__aug{j:03d}.png" for j in range(k)]
        if len(set(targets)) != len(targets):
            raise ConfigError("augmented output names collide; source stems must be unique per identity")
        if not overwrite:
            clash = [t for t in targets if (out / t).exists()]
            if clash or (out / "manifest.tsv").exists():
                raise ConfigError(f"{out} already holds augmented output ({len(clash)} clashes); pass overwrite")

    gen, sal = bundle.generator, bundle.saliency
    modes = gen.training, sal.training
    gen.eval()
    sal.eval()
    scale = bundle.config.noise_scale if noise_scale is None else noise_scale
    results, maps = [], []
    try:
        for i, im in enumerate(images):
            if im.stats is None:
                raise ConfigError(f"{im.source_path or i}: augment needs whitened inputs with stats")
            x = to_tensor(im.pixels[None]).expand(k, -1, -1, -1).contiguous()
            z = gen.encode(x)
            if scale > 0:
                z_noisy = torch.cat([perturb_latent(z[j:j + 1], scale, mix_seed(seed, i, j)) for j in range(k)])
            else:
                z_noisy = z
            p = gen.decode(z_noisy)
            s = sal(z)
            x_adv = compose_adversarial(x, p, s, (bundle.config.clip_lo, bundle.config.clip_hi))
            for j, arr in enumerate(from_tensor(x_adv)):
                name = targets[i * k + j] if targets else f"{im.source_path}#aug{j:03d}"
                results.append(FaceImage(dewhiten(arr, im.stats), im.identity, name))
            maps.extend(from_tensor(s))
    finally:
        gen.train(modes[0])
        sal.train(modes[1])

    manifest = None
    if out is not None:
        entries = []
        for path, res, smap in zip(targets, results, maps):
            dest = out / path
            dest.parent.mkdir(parents=True, exist_ok=True)
            _save_png(res.pixels, dest)
            entries.append(ManifestEntry(path, res.identity))
            if save_saliency:
                _save_png(smap, dest.with_name(dest.stem + "__saliency.png"))
        manifest = DatasetManifest(out, tuple(entries), images[0].size if images else 0)
        write_manifest(manifest, out / "manifest.tsv")
    return AugmentResult(results, maps, manifest)


def _save_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(np.asarray(pixels), 0, 1) * 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
