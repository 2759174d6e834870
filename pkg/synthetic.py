"""
Synthetic "shapes" dataset for desk-scale runs: rectangles (class 1) and
ellipses (class 2) on a noisy background (class 0)
"""
import json
import logging
from pathlib import Path
from typing import List, Literal, Union

import numpy as np
from PIL import Image, ImageDraw

from config import DEFAULTS
from data_ingest import SPLIT_NAMES, split_sizes

logger = logging.getLogger(__name__)

SHAPES_CLASSES = [
    {"id": 0, "name": "background", "color": [0, 0, 0]},
    {"id": 1, "name": "rectangle", "color": [220, 60, 60]},
    {"id": 2, "name": "ellipse", "color": [60, 90, 220]},
]


def _draw_sample(rng: np.random.Generator, height: int, width: int):
    base = rng.integers(90, 150, size=3)
    noise = rng.normal(0, 8, size=(height, width, 3))
    pixels = np.clip(base + noise, 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels)
    mask = Image.new("L", (width, height), 0)
    draw_img, draw_mask = ImageDraw.Draw(image), ImageDraw.Draw(mask)

    for class_id, count in ((1, rng.integers(1, 3)), (2, rng.integers(1, 3))):
        color = tuple(SHAPES_CLASSES[class_id]["color"])
        for _ in range(int(count)):
            w = int(rng.integers(width // 6, width // 3))
            h = int(rng.integers(height // 6, height // 3))
            x0 = int(rng.integers(0, width - w))
            y0 = int(rng.integers(0, height - h))
            box = [x0, y0, x0 + w, y0 + h]
            if class_id == 1:
                draw_img.rectangle(box, fill=color)
                draw_mask.rectangle(box, fill=class_id)
            else:
                draw_img.ellipse(box, fill=color)
                draw_mask.ellipse(box, fill=class_id)
    return image, mask


def _write(root: Path, ids: List[str], images, masks):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for sample_id, image, mask in zip(ids, images, masks):
        image.save(root / "images" / f"{sample_id}.png")
        mask.save(root / "masks" / f"{sample_id}.png")


def write_shapes_dataset(
    root: Union[str, Path],
    n: int = 16,
    height: int = 64,
    width: int = 96,
    seed: int = 0,
    layout: Literal["flat", "predefined"] = "flat",
) -> List[str]:
    """
    Write n image/mask pairs plus classes.json under root

    Returns:
        the sample ids, in order
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = [f"shape_{i:04d}" for i in range(n)]
    drawn = [_draw_sample(rng, height, width) for _ in ids]
    images = [d[0] for d in drawn]
    masks = [d[1] for d in drawn]

    if layout == "flat":
        _write(root, ids, images, masks)
    else:
        start = 0
        for name, size in zip(SPLIT_NAMES, split_sizes(n, DEFAULTS["split_ratios"])):
            part = slice(start, start + size)
            _write(root / name, ids[part], images[part], masks[part])
            start += size

    (root / "classes.json").write_text(json.dumps(SHAPES_CLASSES, indent=2), encoding="utf-8")
    logger.info(f"🎨 Wrote {n} synthetic samples ({height}x{width}, {layout}) to {root}")
    return ids
