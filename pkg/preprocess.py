"""
Preprocessing
Resize to the network input size, ImageNet-style normalization and
training-time augmentation applied identically to image and mask
"""
import logging
import os
import random
import threading
from contextlib import contextmanager
from typing import Optional, Sequence, Tuple

os.environ.setdefault("NO_ALBUMENTATIONS_UPDATE", "1")

import albumentations as A
import cv2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from torch.utils.data import Dataset

from config import DEFAULTS
from data_ingest import Sample, read_image, read_mask
from errors import PairingError, ShapeError

logger = logging.getLogger(__name__)

Range = Tuple[float, float]

# albumentations draws from the global `random` / `np.random` state
_RANDOM_LOCK = threading.Lock()


class AugmentSpec(BaseModel):
    """Per-transform probabilities and magnitudes for training augmentation"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hflip_p: float = DEFAULTS["augment_probability"]
    vflip_p: float = DEFAULTS["augment_probability"]
    scale_p: float = DEFAULTS["augment_probability"]
    scale_range: Range = DEFAULTS["scale_range"]
    rotate_p: float = DEFAULTS["augment_probability"]
    rotate_limit: Range = DEFAULTS["rotate_limit"]
    noise_p: float = DEFAULTS["augment_probability"]
    noise_var_range: Range = DEFAULTS["noise_var_range"]
    perspective_p: float = DEFAULTS["augment_probability"]
    perspective_scale: Range = DEFAULTS["perspective_scale"]
    color_p: float = DEFAULTS["augment_probability"]
    brightness: float = DEFAULTS["brightness"]
    contrast: float = DEFAULTS["contrast"]
    hue: float = DEFAULTS["hue"]
    seed: int = DEFAULTS["seed"]

    @field_validator("hflip_p", "vflip_p", "scale_p", "rotate_p", "noise_p", "perspective_p", "color_p")
    @classmethod
    def _probability(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"probability must be in [0,1], got {value}")
        return value

    @field_validator("scale_range", "rotate_limit", "noise_var_range", "perspective_scale")
    @classmethod
    def _ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"range must be ordered (lo <= hi), got {value}")
        return value

    @field_validator("brightness", "contrast", "hue")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError(f"color delta must be >= 0, got {value}")
        return value

    @model_validator(mode="after")
    def _magnitudes(self):
        if self.scale_range[0] <= 0:
            raise ValueError("scale factors must be positive")
        if self.noise_var_range[0] < 0:
            raise ValueError("noise variance must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue delta must be <= 0.5")
        return self

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(hflip_p=0, vflip_p=0, scale_p=0, rotate_p=0, noise_p=0, perspective_p=0, color_p=0)


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    target_height: int = DEFAULTS["target_height"]
    target_width: int = DEFAULTS["target_width"]
    norm_mean: Tuple[float, float, float] = DEFAULTS["norm_mean"]
    norm_std: Tuple[float, float, float] = DEFAULTS["norm_std"]
    augment: Optional[AugmentSpec] = None

    @field_validator("target_height", "target_width")
    @classmethod
    def _positive_size(cls, value):
        if value <= 0:
            raise ValueError(f"target size must be positive, got {value}")
        return value

    @field_validator("norm_std")
    @classmethod
    def _positive_std(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError(f"norm_std components must be > 0, got {value}")
        return value


# ---------------------------------------------------------------------------
# Deterministic steps
# ---------------------------------------------------------------------------

def _check_pair(image: np.ndarray, mask: np.ndarray):
    if image.shape[:2] != mask.shape[:2]:
        raise PairingError(
            f"image is {image.shape[0]}x{image.shape[1]} but mask is {mask.shape[0]}x{mask.shape[1]}"
        )


def resize_pair(image: np.ndarray, mask: np.ndarray, cfg: PreprocessConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear resize for the image, nearest-neighbour for the mask"""
    _check_pair(image, mask)
    resize = A.Resize(cfg.target_height, cfg.target_width, interpolation=cv2.INTER_LINEAR, p=1.0)
    out = resize(image=image, mask=mask)
    return out["image"], out["mask"]


def normalize(image: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """(pixel / 255 - mean) / std per channel; returns float32 H x W x 3"""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an 8-bit H x W x 3 image, got {image.dtype} {image.shape}")
    norm = A.Normalize(mean=cfg.norm_mean, std=cfg.norm_std, max_pixel_value=255.0, p=1.0)
    return norm(image=image)["image"].astype(np.float32)


def denormalize(field: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Inverse of normalize, back to pixel / 255 values"""
    mean = np.asarray(cfg.norm_mean, dtype=np.float64)
    std = np.asarray(cfg.norm_std, dtype=np.float64)
    return field.astype(np.float64) * std + mean


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def build_augmentation(spec: AugmentSpec) -> A.ReplayCompose:
    """Geometric transforms first (image + mask), then photometric (image only)"""
    border = cv2.BORDER_REFLECT_101  # no fill value, so no new labels at the borders
    return A.ReplayCompose(
        [
            A.HorizontalFlip(p=spec.hflip_p),
            A.VerticalFlip(p=spec.vflip_p),
            A.Affine(
                scale=spec.scale_range,
                keep_ratio=True,
                interpolation=cv2.INTER_LINEAR,
                mask_interpolation=cv2.INTER_NEAREST,
                mode=border,
                p=spec.scale_p,
            ),
            A.Rotate(
                limit=spec.rotate_limit,
                interpolation=cv2.INTER_LINEAR,
                border_mode=border,
                p=spec.rotate_p,
            ),
            A.Perspective(
                scale=spec.perspective_scale,
                keep_size=True,
                pad_mode=border,
                interpolation=cv2.INTER_LINEAR,
                p=spec.perspective_p,
            ),
            A.GaussNoise(var_limit=spec.noise_var_range, p=spec.noise_p),
            A.ColorJitter(
                brightness=spec.brightness,
                contrast=spec.contrast,
                saturation=0.0,
                hue=spec.hue,
                p=spec.color_p,
            ),
        ],
        p=1.0,
    )


@contextmanager
def _seeded(seed: int):
    with _RANDOM_LOCK:
        py_state = random.getstate()
        np_state = np.random.get_state()
        random.seed(seed)
        np.random.seed(seed % (2 ** 32))
        try:
            yield
        finally:
            random.setstate(py_state)
            np.random.set_state(np_state)


def augment_pair_recorded(
    image: np.ndarray, mask: np.ndarray, spec: AugmentSpec, draw: int
) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Like augment_pair, also returning the replay record of the applied transforms"""
    _check_pair(image, mask)
    pipeline = build_augmentation(spec)
    with _seeded(draw):
        out = pipeline(image=image, mask=mask)
    return out["image"], out["mask"], out["replay"]


def augment_pair(image: np.ndarray, mask: np.ndarray, spec: AugmentSpec, draw: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random augmentation of an image/mask pair

    Args:
        draw: random state for this pair; the same draw gives the same output

    Returns:
        (image, mask) with unchanged dimensions
    """
    image_out, mask_out, _ = augment_pair_recorded(image, mask, spec, draw)
    return image_out, mask_out


def replay_geometry(record: dict, image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Re-apply a recorded augmentation to another (or the original) pair"""
    out = A.ReplayCompose.replay(record, image=image, mask=mask)
    return out["image"], out["mask"]


def derive_seed(seed: int, *keys: int) -> int:
    """Independent per-sample random state from a root seed"""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def load_pair(sample: Sample) -> Tuple[np.ndarray, np.ndarray]:
    image = read_image(sample.image_path)
    mask = read_mask(sample.mask_path).astype(np.uint8)
    return image, mask


def to_tensors(image: np.ndarray, mask: np.ndarray, cfg: PreprocessConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    field = normalize(image, cfg)
    return (
        torch.from_numpy(np.ascontiguousarray(field.transpose(2, 0, 1))),
        torch.from_numpy(np.ascontiguousarray(mask)).long(),
    )


def prepare_pair(
    image: np.ndarray,
    mask: np.ndarray,
    cfg: PreprocessConfig,
    draw: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Resize, optionally augment (when draw is given and cfg.augment set), normalize"""
    image, mask = resize_pair(image, mask, cfg)
    if draw is not None and cfg.augment is not None:
        image, mask = augment_pair(image, mask, cfg.augment, draw)
    return to_tensors(image, mask, cfg)


class SegmentationDataset(Dataset):
    """
    Samples as (C x H x W float tensor, H x W int64 mask)

    Augmentation is online: with train=True each (epoch, index) gets its own
    random state derived from the augment seed, so results do not depend on
    worker scheduling.
    """

    def __init__(self, samples: Sequence[Sample], cfg: PreprocessConfig, train: bool = False):
        self.samples = list(samples)
        self.cfg = cfg
        self.train = train
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        image, mask = load_pair(self.samples[idx])
        draw = None
        if self.train and self.cfg.augment is not None:
            draw = derive_seed(self.cfg.augment.seed, self.epoch, idx)
        return prepare_pair(image, mask, self.cfg, draw)
