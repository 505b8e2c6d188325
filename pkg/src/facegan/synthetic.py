"""Procedural face-like fixtures with per-identity structure.

Every identity shares one crude face layout (eyes, nose, mouth, cheeks as
Gaussian blobs on an oval) and perturbs it by an identity-specific offset of
size ``spread``. Each image of an identity then shifts the pattern, jitters
blobs, applies a random lighting gradient and contrast, and adds pixel
noise. ``structure="noise"`` gives label-free images for chance baselines.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import FaceImage, ManifestEntry, DatasetManifest, write_manifest


# shared layout in unit coordinates: eyes, nose, mouth, cheeks
_LAYOUT = np.array([[0.32, 0.36], [0.68, 0.36], [0.5, 0.55], [0.5, 0.74], [0.25, 0.6], [0.75, 0.6]])
_WIDTHS = np.array([0.07, 0.07, 0.06, 0.09, 0.1, 0.1])
_AMPS = np.array([-1.0, -1.0, 0.5, -0.8, 0.3, 0.3])


def _identity_template(rng: np.random.Generator, channels: int, spread: float) -> dict:
    n = len(_LAYOUT)
    return {
        "centers": _LAYOUT + rng.normal(0, spread, size=(n, 2)),
        "widths": _WIDTHS * np.exp(rng.normal(0, 2 * spread, size=n)),
        "amps": (_AMPS[:, None] + rng.normal(0, 4 * spread, size=(n, channels))),
    }


def _render(t: dict, size: int, rng: np.random.Generator, jitter: float, noise: float) -> np.ndarray:
    channels = t["amps"].shape[1]
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    shift = rng.normal(0, jitter, size=2)
    light = rng.normal(0, 0.6, size=(2, channels))
    img = light[0] * (xx[..., None] - 0.5) + light[1] * (yy[..., None] - 0.5)
    face = np.exp(-(((xx - 0.5 - shift[0]) / 0.38) ** 2 + ((yy - 0.55 - shift[1]) / 0.48) ** 2) ** 2)
    img = img + 0.8 * face[..., None]
    for c, w, a in zip(t["centers"], t["widths"], t["amps"]):
        cx, cy = c + shift + rng.normal(0, jitter / 2, size=2)
        ww = w * np.exp(rng.normal(0, 0.1))
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * ww ** 2))
        img = img + g[..., None] * a * np.exp(rng.normal(0, 0.15))
    img = img * np.exp(rng.normal(0, 0.15))
    img = img + rng.normal(0, noise, size=img.shape)
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-9)


def synthetic_faces(
    n_identities: int,
    n_images: int,
    size: int = 16,
    channels: int = 1,
    seed: int = 0,
    jitter: float = 0.04,
    noise: float = 0.08,
    spread: float = 0.06,
    structure: str = "faces",
) -> list[FaceImage]:
    """Unwhitened [0, 1] images, identities named ``id000``, ``id001``..."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_identities):
        ident = f"id{i:03d}"
        template = _identity_template(rng, channels, spread)
        for j in range(n_images):
            if structure == "noise":
                px = rng.uniform(0, 1, size=(size, size, channels))
            else:
                px = _render(template, size, rng, jitter, noise)
            out.append(FaceImage(px, ident, f"{ident}/{j:04d}.png"))
    return out


def write_dataset(images: list[FaceImage], root: Path | str, sidecar: bool = False) -> DatasetManifest:
    """Write images as 8-bit PNGs under ``<root>/<identity>/``."""
    root = Path(root)
    entries = []
    for im in images:
        dest = root / im.source_path
        dest.parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(np.clip(im.pixels, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(dest)
        entries.append(ManifestEntry(im.source_path, im.identity))
    manifest = DatasetManifest(root, tuple(entries), images[0].size if images else 0)
    if sidecar:
        write_manifest(manifest, root / "manifest.tsv")
    return manifest
