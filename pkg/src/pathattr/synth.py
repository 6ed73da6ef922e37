"""Synthetic three-class lesion images with ground-truth masks.

Each image is a dim elliptical "head" on a black field with one of three
bright lesion layouts:

* ``glioma``: one large irregular blob anywhere inside the head;
* ``meningioma``: two smaller blobs mirrored through the head centre;
* ``pituitary``: one small blob near the bottom centre.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .io import DatasetManifest, ManifestEntry, ensure_dir, quantize, write_manifest, write_pgm

CLASS_NAMES = ["glioma", "meningioma", "pituitary"]


@dataclass(frozen=True)
class SynthSpec:
    size: int = 32
    samples_per_class: int = 500
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be at least 16")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def _blob(size: int, center, radius: float, rng) -> np.ndarray:
    """Star-shaped blob whose radius wobbles with angle."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    theta = np.arctan2(dy, dx)
    a2, a3 = rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.15)
    p2, p3 = rng.uniform(0, 2 * np.pi, size=2)
    r = radius * (1.0 + a2 * np.sin(2 * theta + p2) + a3 * np.sin(3 * theta + p3))
    return np.hypot(dy, dx) <= r


def _sample(label: int, size: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    s = size / 32.0
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ry, rx = rng.uniform(12.5, 14.5) * s, rng.uniform(11.0, 13.0) * s
    head = ((yy - c) / ry) ** 2 + ((xx - c) / rx) ** 2 <= 1.0
    img = np.where(head, rng.uniform(0.15, 0.3), 0.0)

    if label == 0:
        radius = rng.uniform(4.0, 6.5) * s
        reach = rng.uniform(0, 8.5 * s)
        ang = rng.uniform(0, 2 * np.pi)
        mask = _blob(size, (c + reach * np.sin(ang), c + reach * np.cos(ang)), radius, rng)
    elif label == 1:
        ang = rng.uniform(0, 2 * np.pi)
        reach = rng.uniform(6.0, 9.0) * s
        off = np.array([reach * np.sin(ang), reach * np.cos(ang)])
        mask = np.zeros((size, size), dtype=bool)
        for sign in (1.0, -1.0):
            mask |= _blob(size, c + sign * off, rng.uniform(2.5, 4.0) * s, rng)
    elif label == 2:
        center = (c + rng.uniform(3.0, 9.0) * s, c + rng.uniform(-3.0, 3.0) * s)
        mask = _blob(size, center, rng.uniform(2.5, 4.5) * s, rng)
    else:
        raise ValueError(f"unknown archetype {label}")

    img = np.where(mask, rng.uniform(0.55, 0.95), img)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def synthesize(spec: SynthSpec = SynthSpec()) -> Dataset:
    """In-memory dataset, already quantised to 8 bits like the files on disk."""
    rng = np.random.default_rng(spec.seed)
    images, masks, labels = [], [], []
    for label in range(len(CLASS_NAMES)):
        for _ in range(spec.samples_per_class):
            img, mask = _sample(label, spec.size, spec.noise, rng)
            images.append(quantize(img).astype(np.float64) / 255.0)
            masks.append(mask)
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), np.stack(masks), list(CLASS_NAMES))


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write images, masks and ``manifest.json`` under ``out_dir``."""
    root = ensure_dir(out_dir)
    ensure_dir(root / "images")
    ensure_dir(root / "masks")
    ds = synthesize(spec)
    entries = []
    for i, (img, mask, label) in enumerate(zip(ds.images, ds.masks, ds.labels)):
        stem = f"{CLASS_NAMES[label]}_{i:05d}"
        write_pgm(root / "images" / f"{stem}.pgm", img)
        write_pgm(root / "masks" / f"{stem}.pgm", mask.astype(np.uint8) * 255)
        entries.append(ManifestEntry(f"images/{stem}.pgm", int(label), f"masks/{stem}.pgm"))
    manifest = DatasetManifest(Path(root), entries, list(CLASS_NAMES))
    write_manifest(manifest, root / "manifest.json")
    return manifest
