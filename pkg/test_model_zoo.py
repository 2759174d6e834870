"""
Tests for model construction and checkpoint save/load
"""
import json

import pytest
import torch

from errors import (
    CheckpointNotFoundError,
    ConfigError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    ShapeError,
)
from model_zoo import (
    Architecture,
    ModelSpec,
    build_model,
    el_variant_name,
    ensemble_member_specs,
    load_weights,
    read_sidecar,
    save_weights,
    sidecar_path,
)


def _spec(architecture="unet", num_classes=3, encoder="efficientnet-b0"):
    return ModelSpec(architecture=architecture, encoder=encoder, encoder_pretrained=False, num_classes=num_classes)


@pytest.fixture
def fixed_input():
    generator = torch.Generator().manual_seed(0)
    return torch.randn(1, 3, 64, 96, generator=generator)


@pytest.mark.parametrize("architecture", list(Architecture))
def test_every_architecture_outputs_softmax(architecture):
    model = build_model(_spec(architecture, num_classes=5), seed=0).eval()
    x = torch.randn(1, 3, 320, 480, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        probs = model(x)
    assert probs.shape == (1, 5, 320, 480)
    assert torch.all(probs >= 0)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(1, 320, 480), atol=1e-5, rtol=0)


def test_architecture_aliases():
    assert _spec("U-Net").architecture == Architecture.UNET
    assert _spec("unet++").architecture == Architecture.UNETPP
    assert _spec("UNet++").display_name == "UNet++/efficientnet-b0"


def test_single_class_rejected():
    with pytest.raises(ConfigError):
        build_model(_spec(num_classes=1))


def test_unknown_encoder_rejected():
    with pytest.raises(ConfigError):
        build_model(_spec(encoder="efficientnet-b99"))


def test_same_seed_same_model(fixed_input):
    a = build_model(_spec(), seed=3).eval()
    b = build_model(_spec(), seed=3).eval()
    with torch.no_grad():
        assert torch.equal(a(fixed_input), b(fixed_input))


def test_seeded_build_leaves_global_rng():
    torch.manual_seed(10)
    expected = torch.rand(1)
    torch.manual_seed(10)
    build_model(_spec(), seed=0)
    assert torch.equal(torch.rand(1), expected)


def test_indivisible_input_is_shape_error():
    model = build_model(_spec(), seed=0).eval()
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 3, 65, 96))
    with pytest.raises(ShapeError):
        model(torch.zeros(3, 64, 96))


def test_checkpoint_round_trip(tmp_path, fixed_input):
    model = build_model(_spec(), seed=0).eval()
    path = save_weights(model, tmp_path / "m.ckpt", extra={"epoch": 4})
    meta = read_sidecar(path)
    assert meta["architecture"] == "unet"
    assert meta["epoch"] == 4
    assert meta["parameter_count"] == model.parameter_count

    loaded = load_weights(path, spec=_spec())
    with torch.no_grad():
        assert torch.equal(model(fixed_input), loaded(fixed_input))
    assert not loaded.training


def test_load_without_spec_trusts_sidecar(tmp_path):
    path = save_weights(build_model(_spec("fpn"), seed=0), tmp_path / "fpn.ckpt")
    assert load_weights(path).spec.architecture == Architecture.FPN


def test_incompatible_checkpoint(tmp_path):
    path = save_weights(build_model(_spec("fpn"), seed=0), tmp_path / "fpn.ckpt")
    with pytest.raises(IncompatibleCheckpointError) as exc:
        load_weights(path, spec=_spec("unet"))
    assert "fpn" in str(exc.value) and "unet" in str(exc.value)


def test_truncated_checkpoint_is_corrupt(tmp_path):
    path = save_weights(build_model(_spec(), seed=0), tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_weights(path)


def test_truncated_checkpoint_without_checksum_is_corrupt(tmp_path):
    path = save_weights(build_model(_spec(), seed=0), tmp_path / "m.ckpt")
    meta = json.loads(sidecar_path(path).read_text())
    del meta["sha256"]
    sidecar_path(path).write_text(json.dumps(meta))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_weights(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointNotFoundError):
        load_weights(tmp_path / "absent.ckpt")


def test_ensemble_member_specs():
    specs = ensemble_member_specs(4, num_classes=5, pretrained=False)
    assert [s.architecture for s in specs] == [Architecture.UNET, Architecture.FPN]
    assert {s.encoder for s in specs} == {"efficientnet-b4"}
    assert el_variant_name(specs[0].encoder) == "EL-4"


@pytest.mark.network
def test_pretrained_encoder_differs_from_random_init(fixed_input):
    pretrained = ModelSpec(architecture="unet", encoder="efficientnet-b0", encoder_pretrained=True, num_classes=3)
    a = build_model(pretrained, seed=0)
    b = build_model(_spec(), seed=0)
    first_a = next(iter(a.net.encoder.state_dict().values()))
    first_b = next(iter(b.net.encoder.state_dict().values()))
    assert not torch.equal(first_a, first_b)
