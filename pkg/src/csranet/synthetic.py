"""Synthetic quadrant-blob dataset for desk-scale experiments.

Class ``j`` (of four) is a coloured disc placed somewhere inside quadrant
``j`` of a noisy grey image; every image carries between one and three
classes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, LabelVocabulary, Sample, write_manifest

QUADRANT_CLASSES = ("top_left_red", "top_right_green", "bottom_left_blue", "bottom_right_yellow")
COLORS = np.array([[220, 40, 40], [40, 200, 60], [50, 70, 230], [230, 210, 40]], dtype=np.float64)


def render_blob_image(label: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.normal(120.0, 12.0, size=(size, size, 3))
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    for j in np.flatnonzero(label):
        oy, ox = (j // 2) * half, (j % 2) * half
        r = rng.uniform(0.18, 0.3) * half
        cy = oy + rng.uniform(r, half - r)
        cx = ox + rng.uniform(r, half - r)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[disc] = COLORS[j] + rng.normal(0.0, 8.0, size=(int(disc.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def random_labels(n: int, rng: np.random.Generator, num_classes: int = 4) -> np.ndarray:
    labels = np.zeros((n, num_classes), dtype=np.int8)
    for i in range(n):
        k = int(rng.integers(1, 4))
        labels[i, rng.choice(num_classes, size=k, replace=False)] = 1
    return labels


def make_quadrant_dataset(out_dir, n: int = 400, size: int = 64, seed: int = 0) -> DatasetManifest:
    """Write ``n`` PNG images and ``manifest.csv`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = random_labels(n, rng)
    samples = []
    for i, label in enumerate(labels):
        path = out / "images" / f"img_{i:04d}.png"
        Image.fromarray(render_blob_image(label, size, rng)).save(path)
        samples.append(Sample(path, label))
    manifest = DatasetManifest(LabelVocabulary(QUADRANT_CLASSES), samples, [f"synthetic quadrant blobs, seed={seed}"])
    write_manifest(manifest, out / "manifest.csv")
    return manifest
