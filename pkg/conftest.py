"""
Shared fixtures: tiny on-disk datasets written with Pillow under tmp_path
"""
import json
import os

import numpy as np
import pytest
from PIL import Image

from data_ingest import ClassTable, load_class_table
from model_zoo import ModelSpec
from preprocess import PreprocessConfig
from synthetic import SHAPES_CLASSES, write_shapes_dataset


def pytest_collection_modifyitems(config, items):
    if os.getenv("ENSEG_RUN_NETWORK_TESTS") == "1":
        return
    skip = pytest.mark.skip(reason="needs network downloads, set ENSEG_RUN_NETWORK_TESTS=1")
    for item in items:
        if "network" in item.keywords:
            item.add_marker(skip)


def write_pair(root, sample_id, image, mask):
    """Write images/<id>.png and masks/<id>.png under root"""
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(root / "images" / f"{sample_id}.png")
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(root / "masks" / f"{sample_id}.png")


def random_pair(rng, height=32, width=48, num_classes=3):
    image = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    mask = rng.integers(0, num_classes, size=(height, width), dtype=np.uint8)
    return image, mask


@pytest.fixture
def class_table_path(tmp_path):
    path = tmp_path / "classes.json"
    path.write_text(json.dumps(SHAPES_CLASSES), encoding="utf-8")
    return path


@pytest.fixture
def class_table(class_table_path) -> ClassTable:
    return load_class_table(class_table_path)


@pytest.fixture
def flat_root(tmp_path):
    """Ten random 32x48 pairs in images/ + masks/"""
    root = tmp_path / "flat"
    rng = np.random.default_rng(0)
    for i in range(10):
        write_pair(root, f"s{i:02d}", *random_pair(rng))
    return root


@pytest.fixture
def shapes_root(tmp_path):
    root = tmp_path / "shapes"
    write_shapes_dataset(root, n=12, height=64, width=96, seed=0, layout="predefined")
    return root


@pytest.fixture
def small_preprocess() -> PreprocessConfig:
    return PreprocessConfig(target_height=64, target_width=96)


@pytest.fixture
def unet_spec() -> ModelSpec:
    return ModelSpec(architecture="unet", encoder="efficientnet-b0", encoder_pretrained=False, num_classes=3)


@pytest.fixture
def fpn_spec() -> ModelSpec:
    return ModelSpec(architecture="fpn", encoder="efficientnet-b0", encoder_pretrained=False, num_classes=3)
