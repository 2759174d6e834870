"""
Tests for resizing, normalization and paired augmentation
"""
import numpy as np
import pytest
import torch

from conftest import random_pair, write_pair
from data_ingest import load_dataset
from errors import PairingError, ShapeError
from preprocess import (
    AugmentSpec,
    PreprocessConfig,
    SegmentationDataset,
    augment_pair,
    augment_pair_recorded,
    denormalize,
    derive_seed,
    normalize,
    prepare_pair,
    replay_geometry,
    resize_pair,
)

GEOMETRY_ONLY = dict(noise_p=0.0, color_p=0.0)


def _only(**probabilities):
    """Spec with every transform off except the ones given"""
    return AugmentSpec.disabled().model_copy(update=probabilities)


# --- resize --- #

def test_resize_to_target():
    rng = np.random.default_rng(0)
    image, mask = random_pair(rng, 1080, 1920, num_classes=5)
    out_image, out_mask = resize_pair(image, mask, PreprocessConfig())
    assert out_image.shape == (320, 480, 3)
    assert out_mask.shape == (320, 480)
    assert set(np.unique(out_mask)) <= set(np.unique(mask))


def test_resize_identity_for_target_size():
    rng = np.random.default_rng(1)
    image, mask = random_pair(rng, 320, 480)
    _, out_mask = resize_pair(image, mask, PreprocessConfig())
    np.testing.assert_array_equal(out_mask, mask)


def test_resize_nearest_keeps_labels():
    mask = np.array([[1, 1], [2, 2]], dtype=np.uint8)
    image = np.zeros((2, 2, 3), dtype=np.uint8)
    _, out = resize_pair(image, mask, PreprocessConfig(target_height=4, target_width=4))
    assert set(np.unique(out)) == {1, 2}
    np.testing.assert_array_equal(out[:2], 1)
    np.testing.assert_array_equal(out[2:], 2)


def test_resize_mismatch():
    with pytest.raises(PairingError):
        resize_pair(np.zeros((4, 4, 3), dtype=np.uint8), np.zeros((4, 5), dtype=np.uint8), PreprocessConfig())


# --- normalize --- #

def test_normalize_single_pixel():
    image = np.full((1, 1, 3), 255, dtype=np.uint8)
    field = normalize(image, PreprocessConfig())
    assert field[0, 0, 0] == pytest.approx((1.0 - 0.485) / 0.229, abs=1e-5)


def test_normalize_identity_stats():
    cfg = PreprocessConfig(norm_mean=(0, 0, 0), norm_std=(1, 1, 1))
    assert normalize(np.zeros((2, 2, 3), dtype=np.uint8), cfg).max() == 0.0


def test_normalize_round_trip():
    rng = np.random.default_rng(2)
    image = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    cfg = PreprocessConfig()
    np.testing.assert_allclose(denormalize(normalize(image, cfg), cfg), image / 255.0, atol=1e-6)


def test_normalize_rejects_bad_input():
    with pytest.raises(ShapeError):
        normalize(np.zeros((4, 4), dtype=np.uint8), PreprocessConfig())
    with pytest.raises(ShapeError):
        normalize(np.zeros((4, 4, 3), dtype=np.float32), PreprocessConfig())


# --- augmentation --- #

def test_disabled_spec_is_identity():
    rng = np.random.default_rng(3)
    image, mask = random_pair(rng, 64, 96)
    out_image, out_mask = augment_pair(image, mask, AugmentSpec.disabled(), draw=11)
    np.testing.assert_array_equal(out_image, image)
    np.testing.assert_array_equal(out_mask, mask)


def test_hflip_twice_recovers_input():
    rng = np.random.default_rng(4)
    image, mask = random_pair(rng, 16, 24)
    spec = _only(hflip_p=1.0)
    once_image, once_mask = augment_pair(image, mask, spec, draw=0)
    np.testing.assert_array_equal(once_mask, mask[:, ::-1])
    twice_image, twice_mask = augment_pair(once_image, once_mask, spec, draw=1)
    np.testing.assert_array_equal(twice_image, image)
    np.testing.assert_array_equal(twice_mask, mask)


def test_quarter_turn_rotates_mask():
    # a rotation by +90 degrees turns the grid counter-clockwise
    mask = np.kron(np.array([[1, 0], [0, 2]], dtype=np.uint8), np.ones((8, 8), dtype=np.uint8))
    image = np.zeros((16, 16, 3), dtype=np.uint8)
    spec = _only(rotate_p=1.0, rotate_limit=(90.0, 90.0))
    _, out = augment_pair(image, mask, spec, draw=0)
    expected = np.kron(np.array([[0, 2], [1, 0]], dtype=np.uint8), np.ones((8, 8), dtype=np.uint8))
    # interpolation may shift the block edges by a pixel
    assert (out == expected).mean() > 0.9
    assert out[4, 4] == 0 and out[4, 12] == 2 and out[12, 4] == 1


def test_same_draw_same_output():
    rng = np.random.default_rng(5)
    image, mask = random_pair(rng, 64, 96)
    spec = AugmentSpec()
    a = augment_pair(image, mask, spec, draw=123)
    b = augment_pair(image, mask, spec, draw=123)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("draw", range(10))
def test_augmentation_never_adds_labels(draw):
    rng = np.random.default_rng(draw)
    image, mask = random_pair(rng, 64, 96, num_classes=3)
    mask[mask == 2] = 0
    out_image, out_mask = augment_pair(image, mask, AugmentSpec(), draw=draw)
    assert out_image.shape == image.shape and out_mask.shape == mask.shape
    assert out_image.dtype == np.uint8
    assert set(np.unique(out_mask)) <= {0, 1}


def test_image_and_mask_stay_aligned():
    # image intensity encodes the label, so geometry must move both together
    mask = np.zeros((64, 96), dtype=np.uint8)
    mask[10:40, 20:60] = 1
    mask[45:60, 5:30] = 2
    image = np.repeat((mask * 100)[..., None], 3, axis=2).astype(np.uint8)
    spec = AugmentSpec(**GEOMETRY_ONLY)
    for draw in range(5):
        out_image, out_mask = augment_pair(image, mask, spec, draw=draw)
        agree = np.abs(out_image[..., 0].astype(int) - out_mask.astype(int) * 100) < 50
        assert agree.mean() > 0.95


def test_replay_reproduces_geometry():
    rng = np.random.default_rng(6)
    image, mask = random_pair(rng, 64, 96)
    spec = AugmentSpec(**GEOMETRY_ONLY)
    out_image, out_mask, record = augment_pair_recorded(image, mask, spec, draw=9)
    again_image, again_mask = replay_geometry(record, image, mask)
    np.testing.assert_array_equal(again_mask, out_mask)
    np.testing.assert_array_equal(again_image, out_image)


def test_augmentation_leaves_global_random_state():
    before = np.random.get_state()[1].copy()
    rng = np.random.default_rng(7)
    augment_pair(*random_pair(rng, 16, 16), AugmentSpec(), draw=5)
    np.testing.assert_array_equal(np.random.get_state()[1], before)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)


# --- tensors / dataset --- #

def test_prepare_pair_tensors():
    rng = np.random.default_rng(8)
    image, mask = random_pair(rng, 40, 50)
    x, y = prepare_pair(image, mask, PreprocessConfig(target_height=32, target_width=64))
    assert x.shape == (3, 32, 64) and x.dtype == torch.float32
    assert y.shape == (32, 64) and y.dtype == torch.int64


def test_dataset_augments_per_epoch(tmp_path, class_table):
    rng = np.random.default_rng(9)
    for i in range(2):
        write_pair(tmp_path / "d", f"s{i}", *random_pair(rng, 64, 96))
    samples = load_dataset(tmp_path / "d", class_table)
    cfg = PreprocessConfig(target_height=64, target_width=96, augment=AugmentSpec(seed=3))

    plain = SegmentationDataset(samples, cfg, train=False)
    x_plain, _ = plain[0]
    np.testing.assert_array_equal(plain[0][0].numpy(), x_plain.numpy())

    train_ds = SegmentationDataset(samples, cfg, train=True)
    train_ds.set_epoch(1)
    first = train_ds[0][0]
    assert torch.equal(first, train_ds[0][0])
    train_ds.set_epoch(2)
    assert not torch.equal(first, train_ds[0][0])
