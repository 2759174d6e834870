"""
Dataset ingestion
Loads image/mask pairs from disk, validates them against the class table,
builds train/valid/test splits and computes per-channel statistics
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from config import Config, DEFAULTS
from errors import (
    ConfigError,
    DatasetNotFoundError,
    DecodeError,
    LabelRangeError,
    LayoutError,
    PairingError,
    SplitError,
    ZeroVarianceError,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_EXTENSION = ".png"
SPLIT_NAMES = ("train", "valid", "test")

RGB = Tuple[int, int, int]


class ClassEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    name: str
    color: RGB

    @field_validator("color")
    @classmethod
    def _color_range(cls, value):
        if any(c < 0 or c > 255 for c in value):
            raise ValueError(f"color components must be in 0..255, got {value}")
        return value


class ClassTable(BaseModel):
    """Ordered class list; background is always id 0"""

    model_config = ConfigDict(frozen=True)

    entries: Tuple[ClassEntry, ...]

    @field_validator("entries")
    @classmethod
    def _by_id(cls, value):
        return tuple(sorted(value, key=lambda e: e.id))

    @model_validator(mode="after")
    def _check_invariants(self):
        ids = [e.id for e in self.entries]
        if len(ids) < 2:
            raise ValueError("class table needs at least 2 classes (background + one)")
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous 0..C-1 without duplicates, got {ids}")
        background = [e for e in self.entries if e.id == 0]
        if background[0].name != "background":
            raise ValueError(f"class 0 must be named 'background', got '{background[0].name}'")
        colors = [e.color for e in self.entries]
        if len(set(colors)) != len(colors):
            raise ValueError(f"class colors must be distinct, got {colors}")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def colors(self) -> List[RGB]:
        return [e.color for e in self.entries]

    def to_json(self) -> list:
        return [{"id": e.id, "name": e.name, "color": list(e.color)} for e in self.entries]


class Sample(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    image_path: Path
    mask_path: Path


class DatasetSplit(BaseModel):
    model_config = ConfigDict(frozen=True)

    train: Tuple[Sample, ...] = ()
    valid: Tuple[Sample, ...] = ()
    test: Tuple[Sample, ...] = ()

    @model_validator(mode="after")
    def _disjoint(self):
        seen = {}
        for name in SPLIT_NAMES:
            for sample in getattr(self, name):
                if sample.id in seen:
                    raise ValueError(f"sample '{sample.id}' appears in both {seen[sample.id]} and {name}")
                seen[sample.id] = name
        return self

    def part(self, name: str) -> Tuple[Sample, ...]:
        if name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split '{name}', expected one of {', '.join(SPLIT_NAMES)}")
        return getattr(self, name)

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


class ChannelStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    pixel_count: int

    @field_validator("mean")
    @classmethod
    def _mean_range(cls, value):
        if any(m < 0.0 or m > 1.0 for m in value):
            raise ValueError(f"channel means must be in [0,1], got {value}")
        return value

    @field_validator("std")
    @classmethod
    def _std_positive(cls, value):
        if any(s <= 0.0 for s in value):
            raise ValueError(f"channel stds must be positive, got {value}")
        return value

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "pixel_count": self.pixel_count}


# ---------------------------------------------------------------------------
# Class table
# ---------------------------------------------------------------------------

def load_class_table(path: Union[str, Path]) -> ClassTable:
    """Read a class table JSON file: [{"id": 0, "name": "background", "color": [0,0,0]}, ...]"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"class table not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return ClassTable(entries=tuple(ClassEntry(**item) for item in raw))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid class table {path}: {e}")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _executor_workers() -> int:
    return max(1, Config.NUM_WORKERS)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    """Decode a single-channel indexed mask into an (H, W) uint8/uint16 array"""
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L", "I", "I;16"):
                raise DecodeError(f"{path}: mask must be single-channel, got mode {img.mode}")
            return np.array(img)
    except (OSError, UnidentifiedImageError) as e:
        raise DecodeError(f"{path}: cannot decode mask ({e})")


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Decode an image into an (H, W, 3) uint8 RGB array"""
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise DecodeError(f"{path}: cannot decode image ({e})")


def _image_size(path: Path) -> Tuple[int, int]:
    try:
        with Image.open(path) as img:
            return img.size
    except (OSError, UnidentifiedImageError) as e:
        raise DecodeError(f"{path}: cannot decode image ({e})")


def _validate_sample(sample: Sample, num_classes: Optional[int]) -> Sample:
    mask = read_mask(sample.mask_path)
    width, height = _image_size(sample.image_path)
    if mask.shape[:2] != (height, width):
        raise PairingError(
            f"{sample.id}: image is {height}x{width} but mask is {mask.shape[0]}x{mask.shape[1]}"
        )
    if num_classes is not None and mask.size:
        top = int(mask.max())
        if top >= num_classes:
            raise LabelRangeError(sample.mask_path, top, num_classes)
    return sample


def _pair_files(root: Path) -> List[Sample]:
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise LayoutError(f"{root}: expected 'images/' and 'masks/' subdirectories")

    samples = {}
    for image_path in sorted(images_dir.iterdir()):
        if image_path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        sample_id = image_path.stem
        if sample_id in samples:
            raise PairingError(f"{image_path}: duplicate sample id '{sample_id}'")
        mask_path = masks_dir / f"{sample_id}{MASK_EXTENSION}"
        if not mask_path.is_file():
            raise PairingError(f"{image_path}: no mask '{mask_path.name}' in {masks_dir}")
        samples[sample_id] = Sample(id=sample_id, image_path=image_path, mask_path=mask_path)

    orphans = sorted(p.stem for p in masks_dir.glob(f"*{MASK_EXTENSION}") if p.stem not in samples)
    if orphans:
        logger.warning(f"⚠️ {len(orphans)} masks without images in {masks_dir}: {orphans[:5]}")

    return [samples[k] for k in sorted(samples)]


def _load(root: Path, class_table: Optional[ClassTable]) -> List[Sample]:
    samples = _pair_files(root)
    num_classes = class_table.num_classes if class_table is not None else None
    with ThreadPoolExecutor(max_workers=_executor_workers()) as pool:
        # map preserves order, so the first failure raised is the same as sequentially
        list(pool.map(lambda s: _validate_sample(s, num_classes), samples))
    return samples


def load_dataset(root: Union[str, Path], class_table: ClassTable) -> List[Sample]:
    """
    Load every image/mask pair under root/images and root/masks

    Returns:
        Samples sorted by id, each validated for size and label range
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset root not found: {root}")
    samples = _load(root, class_table)
    logger.info(f"📂 Loaded {len(samples)} samples from {root}")
    return samples


def load_predefined_split(root: Union[str, Path], class_table: Optional[ClassTable] = None) -> DatasetSplit:
    """Load the on-disk train/valid/test split verbatim"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset root not found: {root}")

    missing = [name for name in SPLIT_NAMES if not (root / name).is_dir()]
    if missing:
        raise LayoutError(f"{root}: missing split directories: {', '.join(missing)}")

    parts = {}
    for name in SPLIT_NAMES:
        parts[name] = tuple(_load(root / name, class_table))
        if not parts[name]:
            logger.warning(f"⚠️ Split '{name}' under {root} is empty")

    try:
        split = DatasetSplit(**parts)
    except ValueError as e:
        raise SplitError(str(e))
    logger.info(f"📂 Predefined split from {root}: sizes {split.sizes()}")
    return split


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    """floor(n * ratio) per split, remainder to train, at least one sample each"""
    valid = max(1, math.floor(n * ratios[1] + 1e-9))
    test = max(1, math.floor(n * ratios[2] + 1e-9))
    train = n - valid - test
    if train < 1:
        raise SplitError(f"cannot split {n} samples with ratios {tuple(ratios)}")
    return train, valid, test


def split_dataset(
    samples: Sequence[Sample],
    ratios: Sequence[float] = DEFAULTS["split_ratios"],
    seed: int = DEFAULTS["split_seed"],
) -> DatasetSplit:
    """Randomly partition samples into train/valid/test; deterministic for a seed"""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(samples)
    if n < 3:
        raise SplitError(f"need at least 3 samples to populate train/valid/test, got {n}")

    ordered = sorted(samples, key=lambda s: s.id)
    if len({s.id for s in ordered}) != n:
        raise SplitError("sample ids must be unique")

    n_train, n_valid, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    picked = [ordered[i] for i in order]

    def _sorted(part):
        return tuple(sorted(part, key=lambda s: s.id))

    split = DatasetSplit(
        train=_sorted(picked[:n_train]),
        valid=_sorted(picked[n_train:n_train + n_valid]),
        test=_sorted(picked[n_train + n_valid:]),
    )
    logger.info(f"🔀 Split {n} samples into {split.sizes()} (seed {seed})")
    return split


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def discover_images(root: Union[str, Path]) -> List[Path]:
    """All images of a flat (images/) or predefined (train|valid|test/images) layout"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset root not found: {root}")
    if (root / "images").is_dir():
        dirs = [root / "images"]
    else:
        dirs = [root / name / "images" for name in SPLIT_NAMES if (root / name / "images").is_dir()]
    if not dirs:
        raise LayoutError(f"{root}: no images/ directory found")
    return sorted(
        p for d in dirs for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _image_moments(path: Path) -> Tuple[int, np.ndarray, np.ndarray]:
    pixels = read_image(path).reshape(-1, 3).astype(np.float64) / 255.0
    mean = pixels.mean(axis=0)
    m2 = ((pixels - mean) ** 2).sum(axis=0)
    return pixels.shape[0], mean, m2


def compute_channel_stats(samples: Iterable[Union[Sample, Path, str]]) -> ChannelStats:
    """
    Population mean/std per RGB channel over every pixel of every image,
    with pixel values scaled to [0, 1]
    """
    paths = [Path(s.image_path) if isinstance(s, Sample) else Path(s) for s in samples]
    if not paths:
        raise DatasetNotFoundError("no images to compute statistics over")

    with ThreadPoolExecutor(max_workers=_executor_workers()) as pool:
        moments = list(pool.map(_image_moments, paths))

    # pairwise merge of (count, mean, M2), in input order
    count, mean, m2 = 0, np.zeros(3), np.zeros(3)
    for n_b, mean_b, m2_b in moments:
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / total)
        count = total

    std = np.sqrt(m2 / count)
    if np.any(std <= 0.0):
        raise ZeroVarianceError(
            f"zero variance in channel(s) {[i for i, s in enumerate(std) if s <= 0.0]} "
            f"(mean {tuple(round(float(m), 6) for m in mean)})"
        )

    stats = ChannelStats(
        mean=tuple(float(np.clip(m, 0.0, 1.0)) for m in mean),
        std=tuple(float(s) for s in std),
        pixel_count=int(count),
    )
    logger.info(f"📊 Channel stats over {len(paths)} images: mean {stats.mean}, std {stats.std}")
    return stats


def write_stats(stats: ChannelStats, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.to_json(), indent=2), encoding="utf-8")
    return path
