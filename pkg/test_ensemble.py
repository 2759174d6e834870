"""
Tests for probability-map fusion and the ensemble wrapper
"""
import pytest
import torch

from ensemble import (
    EnsembleModel,
    FusionMethod,
    FusionSpec,
    argmax_mask,
    fuse,
    load_ensemble,
    predict_ensemble,
)
from errors import ConfigError, FusionShapeError, MemberForwardError
from model_zoo import build_model, save_weights


def _random_map(seed, shape=(3, 8, 12)):
    logits = torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return torch.softmax(logits, dim=0)


@pytest.fixture
def pair(unet_spec, fpn_spec):
    return build_model(unet_spec, seed=0).eval(), build_model(fpn_spec, seed=0).eval()


@pytest.fixture
def image():
    return torch.randn(3, 64, 96, generator=torch.Generator().manual_seed(5))


# --- fusion algebra --- #

def test_fuse_single_pixel():
    a = torch.tensor([0.2, 0.8]).view(2, 1, 1)
    b = torch.tensor([0.6, 0.4]).view(2, 1, 1)
    torch.testing.assert_close(fuse([a, b]).flatten(), torch.tensor([0.4, 0.6]))


@pytest.mark.parametrize("seed", range(10))
def test_fusion_algebra(seed):
    p, q = _random_map(seed), _random_map(seed + 100)
    assert torch.allclose(fuse([p, p]), p, atol=1e-6)
    assert torch.equal(fuse([p, q]), fuse([q, p]))
    torch.testing.assert_close(fuse([p, q]).sum(dim=0), torch.ones(8, 12, dtype=torch.float64), atol=1e-5, rtol=0)

    weighted = fuse([p, q], FusionSpec(weights=(1.0, 3.0)))
    rescaled = fuse([p, q], FusionSpec(weights=(2.5, 7.5)))
    assert torch.allclose(weighted, rescaled, atol=1e-7)
    assert torch.allclose(weighted, 0.25 * p + 0.75 * q, atol=1e-12)
    swapped = fuse([q, p], FusionSpec(weights=(3.0, 1.0)))
    torch.testing.assert_close(weighted, swapped, atol=1e-12, rtol=0)


def test_elementwise_sum_is_renormalized():
    p, q = _random_map(1), _random_map(2)
    out = fuse([p, q], FusionSpec(method=FusionMethod.ELEMENTWISE_SUM))
    assert torch.allclose(out, (p + q) / 2, atol=1e-7, rtol=0)
    assert torch.allclose(out, fuse([p, q]), atol=1e-7, rtol=0)
    assert torch.allclose(out, fuse([p, q], FusionSpec(weights=(2.0, 2.0))), atol=1e-7, rtol=0)
    assert FusionSpec(method="ELEMENTWISE_SUM").method == FusionMethod.ELEMENTWISE_SUM


def test_fuse_errors():
    with pytest.raises(FusionShapeError):
        fuse([_random_map(0), _random_map(1, shape=(3, 8, 8))])
    with pytest.raises(ConfigError):
        fuse([_random_map(0), _random_map(1)], FusionSpec(weights=(1.0, 1.0, 1.0)))
    for weights in [(1.0, -1.0), (1.0, 0.0), (1.0, float("nan"))]:
        with pytest.raises(ValueError):
            FusionSpec(weights=weights)


# --- argmax --- #

def test_argmax_mask():
    probs = torch.tensor([0.1, 0.7, 0.2]).view(3, 1, 1)
    assert argmax_mask(probs).item() == 1
    tie = torch.tensor([0.5, 0.5]).view(2, 1, 1)
    assert argmax_mask(tie).item() == 0

    grid = torch.tensor([
        [[0.9, 0.2], [0.3, 0.5]],
        [[0.1, 0.8], [0.7, 0.5]],
    ])
    assert argmax_mask(grid).tolist() == [[0, 1], [1, 0]]
    assert argmax_mask(grid.unsqueeze(0)).shape == (1, 2, 2)


# --- ensemble model --- #

def test_duplicate_member_identity(pair, image):
    unet, _ = pair
    with torch.no_grad():
        single = unet(image.unsqueeze(0))[0]
        fused = predict_ensemble(EnsembleModel([unet, unet]), image)
    assert torch.allclose(fused, single, atol=1e-6)


def test_ensemble_matches_offline_fuse(pair, image):
    unet, fpn = pair
    with torch.no_grad():
        offline = fuse([unet(image.unsqueeze(0))[0], fpn(image.unsqueeze(0))[0]])
        assert torch.equal(predict_ensemble(EnsembleModel([unet, fpn]), image), offline)
        swapped = predict_ensemble(EnsembleModel([fpn, unet]), image)
    assert torch.allclose(swapped, offline, atol=1e-7)


def test_threaded_members_match_sequential(pair, image):
    ensemble = EnsembleModel(list(pair))
    with torch.no_grad():
        assert torch.equal(
            predict_ensemble(ensemble, image, threads=2),
            predict_ensemble(ensemble, image, threads=1),
        )


def test_ensemble_construction(pair, unet_spec):
    unet, fpn = pair
    ensemble = EnsembleModel([unet, fpn])
    assert ensemble.variant_name == "EL-0"
    assert ensemble.num_classes == 3
    assert ensemble.input_stride == 32
    assert EnsembleModel([unet, fpn], variant_name="mine").variant_name == "mine"

    with pytest.raises(ConfigError):
        EnsembleModel([unet])
    five = build_model(unet_spec.model_copy(update={"num_classes": 5}), seed=0)
    with pytest.raises(ConfigError):
        EnsembleModel([unet, five])


def test_member_failure_names_member(pair):
    ensemble = EnsembleModel(list(pair))
    with pytest.raises(MemberForwardError) as exc:
        predict_ensemble(ensemble, torch.zeros(3, 65, 96))
    assert exc.value.member == 0
    assert exc.value.exit_code == 2


def test_load_ensemble(tmp_path, pair, image):
    unet, fpn = pair
    paths = [save_weights(unet, tmp_path / "u.ckpt"), save_weights(fpn, tmp_path / "f.ckpt")]
    loaded = load_ensemble(paths, FusionSpec(weights=(1.0, 1.0)))
    with torch.no_grad():
        assert torch.equal(loaded(image.unsqueeze(0)), EnsembleModel([unet, fpn])(image.unsqueeze(0)))
