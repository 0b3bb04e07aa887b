"""Manifests, mask-to-label conversion, splitting and image preprocessing.

A manifest is a UTF-8 CSV file with header ``image,<class1>,...,<classC>``
and one 0/1 row per image. Image paths are resolved relative to the
manifest's directory.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IGNORE = "ignore"

# RescueNet damage vocabulary: four building levels, two road states, four object types.
DEFAULT_CLASSES = (
    "building_no_damage",
    "building_medium_damage",
    "building_major_damage",
    "building_total_destruction",
    "road_clear",
    "road_blocked",
    "tree",
    "water",
    "vehicle",
    "pool",
)

# Class ids used by the RescueNet segmentation masks.
RESCUENET_ID_MAP = {
    0: IGNORE,
    1: "water",
    2: "building_no_damage",
    3: "building_medium_damage",
    4: "building_major_damage",
    5: "building_total_destruction",
    6: "vehicle",
    7: "road_clear",
    8: "road_blocked",
    9: "tree",
    10: "pool",
}


class ManifestError(ValueError):
    pass


class ImageDecodeError(OSError):
    pass


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("vocabulary must contain at least one class")
        if any(not n.strip() for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate class names: {dupes}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None


@dataclass
class Sample:
    image: Path
    label: np.ndarray


@dataclass
class DatasetManifest:
    vocabulary: LabelVocabulary
    samples: list[Sample]
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        c = len(self.vocabulary)
        if not self.samples:
            return np.zeros((0, c), dtype=np.int8)
        return np.stack([s.label for s in self.samples])

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(self.vocabulary, [self.samples[i] for i in indices], list(self.notes))


def load_manifest(path, vocabulary: LabelVocabulary | None = None, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty file, expected header 'image,<classes...>'")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "image":
        raise ManifestError(f"{path}: header must start with 'image' followed by class names, got {header}")
    try:
        vocab = LabelVocabulary(tuple(header[1:]))
    except ValueError as e:
        raise ManifestError(f"{path}: {e}") from None
    if vocabulary is not None and vocab.names != vocabulary.names:
        raise ManifestError(f"{path}: header classes {list(vocab.names)} do not match vocabulary {list(vocabulary.names)}")

    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        image = row[0].strip()
        if image in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image {image!r} (first on line {seen[image]})")
        seen[image] = lineno
        label = np.zeros(len(vocab), dtype=np.int8)
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: column {header[j + 1]!r} has non-binary value {cell!r}")
            label[j] = int(cell)
        samples.append(Sample(root / image, label))

    if check_images:
        missing = [str(s.image) for s in samples if not s.image.is_file()]
        if missing:
            raise ManifestError(f"{path}: {len(missing)} referenced image(s) missing: {missing}")
    if not samples:
        warnings.warn(f"{path}: manifest has no samples", stacklevel=2)
    return DatasetManifest(vocab, samples, [f"loaded from {path}"])


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", *manifest.vocabulary.names])
        for s in manifest.samples:
            image = Path(s.image)
            try:
                ref = image.resolve().relative_to(root).as_posix()
            except ValueError:
                ref = str(image)
            writer.writerow([ref, *(int(v) for v in s.label)])
    return path


# -- masks -----------------------------------------------------------------


def derive_labels_from_mask(
    mask,
    id_map: Mapping[int, int | None],
    num_classes: int,
    min_pixels: int = 50,
) -> np.ndarray:
    """Image-level labels from a class-id raster.

    ``id_map`` sends each mask id to a vocabulary index, or to ``None`` for
    ids that are ignored (background). Class ``j`` is present when its
    mapped pixels number at least ``min_pixels``.
    """
    if min_pixels < 1:
        raise ValueError("min_pixels must be a positive integer")
    mask = np.asarray(mask)
    ids, counts = np.unique(mask, return_counts=True)
    unmapped = [int(i) for i in ids if int(i) not in id_map]
    if unmapped:
        raise ValueError(f"mask contains unmapped ids {unmapped}; map them or mark them ignored")
    totals = np.zeros(num_classes, dtype=np.int64)
    for i, n in zip(ids, counts):
        j = id_map[int(i)]
        if j is not None:
            totals[j] += n
    return (totals >= min_pixels).astype(np.int8)


def resolve_id_map(raw: Mapping, vocabulary: LabelVocabulary) -> dict[int, int | None]:
    """Turn ``{mask_id: class name | 'ignore'}`` into ``{mask_id: index | None}``."""
    out: dict[int, int | None] = {}
    for key, value in raw.items():
        try:
            mask_id = int(key)
        except (TypeError, ValueError):
            raise ValueError(f"mask id {key!r} is not an integer") from None
        if value is None or value == IGNORE:
            out[mask_id] = None
        elif isinstance(value, int) and not isinstance(value, bool):
            if not 0 <= value < len(vocabulary):
                raise ValueError(f"mask id {mask_id} maps to out-of-range index {value}")
            out[mask_id] = value
        else:
            out[mask_id] = vocabulary.index(str(value))
    return out


def load_id_map(path) -> tuple[dict, LabelVocabulary, int | None]:
    """Read a TOML id-map file.

    Expected layout::

        classes = ["building_no_damage", ...]   # optional, defaults to RescueNet
        min_pixels = 50                          # optional
        [id_map]
        0 = "ignore"
        1 = "water"
    """
    from .config import read_toml

    doc = read_toml(path)
    unknown = set(doc) - {"classes", "min_pixels", "id_map"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    vocab = LabelVocabulary(tuple(doc["classes"])) if "classes" in doc else LabelVocabulary()
    if "id_map" not in doc:
        raise ValueError(f"{path}: missing [id_map] section")
    return resolve_id_map(doc["id_map"], vocab), vocab, doc.get("min_pixels")


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def convert_masks(
    mask_dir,
    id_map: Mapping[int, int | None],
    vocabulary: LabelVocabulary,
    min_pixels: int = 50,
    image_dir=None,
    mask_suffix: str = "_lab",
) -> DatasetManifest:
    """Build a manifest from a directory of single-channel PNG masks.

    Each mask ``<stem><mask_suffix>.png`` is paired with the image
    ``<stem>.<png|jpg|jpeg>`` in ``image_dir`` (default: the mask directory).
    """
    mask_dir = Path(mask_dir)
    image_dir = Path(image_dir) if image_dir is not None else mask_dir
    masks = sorted(p for p in mask_dir.glob("*.png") if p.stem.endswith(mask_suffix) or not mask_suffix)
    samples, missing = [], []
    for mp in masks:
        stem = mp.stem[: -len(mask_suffix)] if mask_suffix else mp.stem
        image = next((image_dir / f"{stem}{ext}" for ext in IMAGE_SUFFIXES if (image_dir / f"{stem}{ext}").is_file()), None)
        if image is None or image == mp:
            missing.append(stem)
            continue
        with Image.open(mp) as im:
            mask = np.asarray(im)
        if mask.ndim != 2:
            raise ValueError(f"{mp}: mask must be single-channel, got shape {mask.shape}")
        label = derive_labels_from_mask(mask, id_map, len(vocabulary), min_pixels)
        samples.append(Sample(image, label))
    if missing:
        raise FileNotFoundError(f"no image found for mask stem(s): {missing}")
    notes = [f"derived from masks in {mask_dir}", f"min_pixels={min_pixels}"]
    return DatasetManifest(vocabulary, samples, notes)


# -- splitting -------------------------------------------------------------


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``floor(N * train_fraction)`` samples train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    n = len(manifest)
    # guard against products like 0.7 * 20 = 13.999999999999998
    n_train = math.floor(n * train_fraction + 1e-9)
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {train_fraction} leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    return manifest.subset(order[:n_train]), manifest.subset(order[n_train:])


# -- images ----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode to ``H x W x 3`` uint8."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageDecodeError(f"cannot decode {path}: {e}") from e


def load_images(manifest: DatasetManifest) -> tuple[list[np.ndarray], list[int], list[str]]:
    """Decode every image; returns (images, kept sample indices, skipped paths)."""
    images, kept, skipped = [], [], []
    for i, s in enumerate(manifest.samples):
        try:
            images.append(load_image(s.image))
            kept.append(i)
        except ImageDecodeError as e:
            logger.warning("skipping sample: %s", e)
            skipped.append(str(s.image))
    return images, kept, skipped


def _resize(image: np.ndarray, size: int, box=None) -> np.ndarray:
    h, w = image.shape[:2]
    if box is None and (h, w) == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR, box=box))


def preprocess_and_augment(
    image: np.ndarray,
    mode: str,
    target_size: int,
    rng: np.random.Generator | None = None,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
    hflip_prob: float = 0.5,
    crop_scale: tuple[float, float] = (0.8, 1.0),
) -> np.ndarray:
    """``H x W x 3`` uint8 image to a standardized ``3 x S x S`` float64 array.

    Train mode takes a random crop covering ``crop_scale`` of the area (same
    aspect ratio as the source), resizes it, and mirrors it with probability
    ``hflip_prob``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 image, got {image.shape} {image.dtype}")
    flip = False
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        h, w = image.shape[:2]
        lo, hi = crop_scale
        scale = rng.uniform(lo, hi) if hi > lo else lo
        side = math.sqrt(scale)
        ch, cw = max(1, round(h * side)), max(1, round(w * side))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        box = None if (ch, cw) == (h, w) else (left, top, left + cw, top + ch)
        resized = _resize(image, target_size, box)
        flip = rng.random() < hflip_prob
    else:
        resized = _resize(image, target_size)
    x = resized.astype(np.float64) / 255.0
    x = (x - np.asarray(mean)) / np.asarray(std)
    x = x.transpose(2, 0, 1)
    if flip:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(x)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream, independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))
