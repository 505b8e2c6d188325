"""Face dataset loading: directory manifests, crop/resize, whitening, batching.

Images live under ``<root>/<identity>/<file>``. A sidecar ``manifest.tsv`` in
the root, when present, overrides the directory walk and may carry an
external face-detector box per entry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, CropError, DecodeError, EmptyDataset

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SIDECAR_NAME = "manifest.tsv"
WHITEN_EPS = 1e-6
DEFAULT_SIZE = 128
MIN_SOURCE_DIM = 8


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    identity: str
    bbox: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    canonical_size: int = DEFAULT_SIZE
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ConfigError("manifest paths must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.identity] = out.get(e.identity, 0) + 1
        return out

    def absolute(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def subset(self, entries: Sequence[ManifestEntry]) -> "DatasetManifest":
        return replace(self, entries=tuple(entries), skipped=())


@dataclass(frozen=True, eq=False)
class FaceImage:
    """A labeled H x W x C pixel grid.

    ``stats`` holds the (mean, std) removed by :func:`whiten` so that the
    image can be mapped back to display range.
    """

    pixels: np.ndarray
    identity: str
    source_path: str = ""
    stats: tuple[float, float] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] not in (1, 3):
            raise CropError(f"expected square HxWx{{1,3}} pixels, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError(f"non-finite pixels in {self.source_path or self.identity}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True, eq=False)
class Batch:
    images: np.ndarray  # N x H x W x C, whitened, float32
    identities: tuple[str, ...]
    source_paths: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.identities)


def _parse_bbox(text: str) -> tuple[int, int, int, int]:
    parts = [int(round(float(v))) for v in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"bad bbox {text!r}; expected x0,y0,x1,y1")
    return tuple(parts)  # type: ignore[return-value]


def read_sidecar(path: Path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise ConfigError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
        bbox = _parse_bbox(cols[2]) if len(cols) == 3 and cols[2].strip() else None
        entries.append(ManifestEntry(cols[0], cols[1], bbox))
    return entries


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    lines = []
    for e in manifest.entries:
        row = [e.path, e.identity]
        if e.bbox is not None:
            row.append(",".join(str(v) for v in e.bbox))
        lines.append("\t".join(row))
    path = Path(path)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def scan_manifest(root: Path | str, canonical_size: int = DEFAULT_SIZE) -> DatasetManifest:
    """Index ``<root>/<identity>/<file>`` images (or the sidecar manifest)."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    sidecar = root / SIDECAR_NAME
    if sidecar.exists():
        candidates = read_sidecar(sidecar)
    else:
        candidates = [
            ManifestEntry(p.relative_to(root).as_posix(), ident.name)
            for ident in sorted(d for d in root.iterdir() if d.is_dir())
            for p in sorted(ident.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        ]
    entries, skipped = [], []
    for entry in candidates:
        if _readable(root / entry.path):
            entries.append(entry)
        else:
            log.warning("skipping unreadable image %s", entry.path)
            skipped.append(entry.path)
    if not entries:
        raise EmptyDataset(f"no readable images under {root}")
    return DatasetManifest(root, tuple(entries), canonical_size, tuple(skipped))


def _square_box(w: int, h: int) -> tuple[int, int, int, int]:
    side = min(w, h)
    x0, y0 = (w - side) // 2, (h - side) // 2
    return x0, y0, x0 + side, y0 + side


def load_and_crop(
    entry: ManifestEntry | Path | str,
    canonical_size: int = DEFAULT_SIZE,
    root: Path | str | None = None,
    identity: str | None = None,
) -> FaceImage:
    """Decode one image, crop to a square and resize to ``canonical_size``.

    The crop is the entry's bbox when given, else the centered square.
    Pixel values come back in [0, 1].
    """
    if isinstance(entry, ManifestEntry):
        rel, ident, bbox = entry.path, entry.identity, entry.bbox
    else:
        rel, ident, bbox = str(entry), identity or Path(entry).parent.name, None
    path = Path(root) / rel if root is not None else Path(rel)
    try:
        with Image.open(path) as im:
            im.load()
            mode = "L" if im.mode in ("1", "L", "LA", "I", "I;16", "F") else "RGB"
            im = im.convert(mode)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    w, h = im.size
    if min(w, h) < MIN_SOURCE_DIM:
        raise CropError(f"{path}: {w}x{h} is below the {MIN_SOURCE_DIM}px minimum")
    box = bbox if bbox is not None else _square_box(w, h)
    x0, y0, x1, y1 = max(box[0], 0), max(box[1], 0), min(box[2], w), min(box[3], h)
    if x1 <= x0 or y1 <= y0:
        raise CropError(f"{path}: zero-area crop {box}")
    if (x0, y0, x1, y1) != (0, 0, w, h):
        im = im.crop((x0, y0, x1, y1))
    if im.size != (canonical_size, canonical_size):
        im = im.resize((canonical_size, canonical_size), Image.Resampling.BICUBIC)
    pixels = np.asarray(im, dtype=np.float64) / 255.0
    return FaceImage(pixels, ident, str(rel))


def whiten(image: FaceImage, eps: float = WHITEN_EPS) -> FaceImage:
    """Per-image zero-mean, unit-variance transform over all pixels."""
    x = np.asarray(image.pixels, dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std())
    scale = max(std, eps)
    # the summed mean of a constant image can miss the value by an ulp
    centered = np.zeros_like(x) if x.min() == x.max() else x - mean
    return FaceImage(centered / scale, image.identity, image.source_path, (mean, scale))


def dewhiten(pixels: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, scale = stats
    return np.clip(np.asarray(pixels, dtype=np.float64) * scale + mean, 0.0, 1.0)


def load_dataset(manifest: DatasetManifest, whitened: bool = True) -> list[FaceImage]:
    """Load every manifest entry; grayscale images are promoted if the set is mixed."""
    images = [load_and_crop(e, manifest.canonical_size, manifest.root) for e in manifest.entries]
    if len({im.channels for im in images}) > 1:
        images = [
            im if im.channels == 3 else FaceImage(np.repeat(im.pixels, 3, axis=2), im.identity, im.source_path)
            for im in images
        ]
    return [whiten(im) for im in images] if whitened else images


def _ok(labels: Sequence[str]) -> bool:
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return len(counts) >= 2 and counts.max() >= 2


def _swap_in_foreign(order: list[int], labels: Sequence[str], start: int, batch_size: int) -> None:
    """Swap the last item of a single-identity batch with a foreign one elsewhere."""
    last = start + min(batch_size, len(order) - start) - 1
    mine = labels[order[start]]
    for t in range(0, len(order), batch_size):
        if t == start:
            continue
        for j in range(t, min(t + batch_size, len(order))):
            if labels[order[j]] == mine:
                continue
            rest = {labels[order[i]] for i in range(t, min(t + batch_size, len(order))) if i != j}
            if len(rest | {mine}) >= 2:
                order[last], order[j] = order[j], order[last]
                return


def _epoch_order(labels: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[int]:
    by_id: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(lab, []).append(i)
    chunks: list[list[int]] = []
    for lab in sorted(by_id):
        idx = np.asarray(by_id[lab])
        rng.shuffle(idx)
        chunks.extend(idx[j:j + 2].tolist() for j in range(0, len(idx), 2))
    perm = rng.permutation(len(chunks))
    order = [i for c in perm for i in chunks[c]]

    starts = range(0, len(order), batch_size)
    for s in starts:
        if len(order[s:s + batch_size]) >= 2 and len({labels[i] for i in order[s:s + batch_size]}) < 2:
            _swap_in_foreign(order, labels, s, batch_size)
    return order


def batches(
    data: DatasetManifest | Sequence[FaceImage],
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Yield one epoch of whitened batches in a seeded order.

    Entries are shuffled as same-identity pairs so that every full batch
    holds at least one positive pair; (data, batch_size, seed, epoch) fully
    determine the stream.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    images = load_dataset(data) if isinstance(data, DatasetManifest) else list(data)
    if not images:
        raise EmptyDataset("no images to batch")
    labels = [im.identity for im in images]
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = _epoch_order(labels, batch_size, rng)
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        stack = np.stack([images[i].pixels for i in idx]).astype(np.float32)
        stack.setflags(write=False)
        yield Batch(stack, tuple(labels[i] for i in idx), tuple(images[i].source_path for i in idx))


def n_batches(n_items: int, batch_size: int) -> int:
    return -(-n_items // batch_size)


def batch_has_triplets(batch: Batch) -> bool:
    return _ok(batch.identities)
