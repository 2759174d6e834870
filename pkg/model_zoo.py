"""
Model factory
Seven segmentation architectures behind one spec, each ending in a per-pixel
softmax, plus checkpoint save/load with a JSON sidecar for compatibility checks
"""
import hashlib
import json
import logging
import re
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Union

import segmentation_models_pytorch as smp
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, field_validator

from config import Config, DEFAULTS
from errors import (
    CheckpointNotFoundError,
    ConfigError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    ResourceError,
    ShapeError,
)

logger = logging.getLogger(__name__)


class Architecture(str, Enum):
    UNET = "unet"
    UNETPP = "unetplusplus"
    MANET = "manet"
    LINKNET = "linknet"
    FPN = "fpn"
    PSPNET = "pspnet"
    PAN = "pan"


ARCHITECTURES = {
    Architecture.UNET: smp.Unet,
    Architecture.UNETPP: smp.UnetPlusPlus,
    Architecture.MANET: smp.MAnet,
    Architecture.LINKNET: smp.Linknet,
    Architecture.FPN: smp.FPN,
    Architecture.PSPNET: smp.PSPNet,
    Architecture.PAN: smp.PAN,
}

# input sides must be multiples of these
INPUT_STRIDE = {arch: 32 for arch in Architecture}
INPUT_STRIDE[Architecture.PSPNET] = 8  # smp default encoder_depth=3

DISPLAY_NAMES = {
    Architecture.UNET: "UNet",
    Architecture.UNETPP: "UNet++",
    Architecture.MANET: "MANet",
    Architecture.LINKNET: "LinkNet",
    Architecture.FPN: "FPN",
    Architecture.PSPNET: "PSPNet",
    Architecture.PAN: "PAN",
}

_ALIASES = {
    "u-net": "unet",
    "unet++": "unetplusplus",
    "unetpp": "unetplusplus",
    "u-net++": "unetplusplus",
    "psp": "pspnet",
}

EFFICIENTNET_VARIANTS = [f"efficientnet-b{k}" for k in range(5)]


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=False)

    architecture: Architecture = Architecture(DEFAULTS["architecture"])
    encoder: str = DEFAULTS["encoder"]
    encoder_pretrained: bool = DEFAULTS["encoder_pretrained"]
    num_classes: int
    activation: Literal["softmax2d"] = "softmax2d"

    @field_validator("architecture", mode="before")
    @classmethod
    def _alias(cls, value):
        if isinstance(value, str):
            value = value.strip().lower()
            return _ALIASES.get(value, value)
        return value

    @property
    def display_name(self) -> str:
        return f"{DISPLAY_NAMES[self.architecture]}/{self.encoder}"

    def sidecar(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "encoder": self.encoder,
            "encoder_pretrained": self.encoder_pretrained,
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    def compatible_with(self, other: "ModelSpec") -> bool:
        return (
            self.architecture == other.architecture
            and self.encoder == other.encoder
            and self.num_classes == other.num_classes
        )


class SegModel(nn.Module):
    """Normalized image batch (N, 3, H, W) -> class probabilities (N, C, H, W)"""

    def __init__(self, spec: ModelSpec, net: nn.Module):
        super().__init__()
        self.spec = spec
        self.net = net

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input of shape (N, 3, H, W), got {tuple(x.shape)}")
        stride = INPUT_STRIDE[self.spec.architecture]
        height, width = x.shape[-2:]
        if height % stride or width % stride:
            raise ShapeError(
                f"{self.spec.display_name} needs height and width divisible by {stride}, "
                f"got {height}x{width}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.net(x)


def resolve_device(name: Optional[str] = None) -> torch.device:
    name = (name or Config.DEVICE or "auto").lower()
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def build_model(spec: ModelSpec, seed: Optional[int] = None) -> SegModel:
    """
    Build one segmentation network from its spec

    Args:
        spec: architecture, encoder and class count
        seed: when given, parameter initialization is reproducible

    Returns:
        SegModel emitting softmax probabilities
    """
    if spec.num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2 for multiclass softmax, got {spec.num_classes}")
    if spec.encoder not in smp.encoders.get_encoder_names():
        raise ConfigError(f"unknown encoder '{spec.encoder}'")

    Config.apply_cache()
    factory = ARCHITECTURES[spec.architecture]
    kwargs = dict(
        encoder_name=spec.encoder,
        encoder_weights="imagenet" if spec.encoder_pretrained else None,
        in_channels=3,
        classes=spec.num_classes,
        activation=spec.activation,
    )

    try:
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            net = factory(**kwargs)
    except KeyError as e:
        raise ConfigError(f"encoder '{spec.encoder}' has no pretrained weights: {e}")
    except (OSError, RuntimeError) as e:
        raise ResourceError(f"cannot obtain pretrained weights for '{spec.encoder}': {e}")

    model = SegModel(spec, net)
    logger.info(f"🧱 Built {spec.display_name} ({model.parameter_count:,} parameters)")
    return model


def el_variant_name(encoder: str) -> str:
    """EL-k for an EfficientNet-Bk encoder"""
    match = re.search(r"efficientnet-b(\d)", encoder)
    return f"EL-{match.group(1)}" if match else f"EL-{encoder}"


def ensemble_member_specs(variant: int, num_classes: int, pretrained: bool = True) -> List[ModelSpec]:
    """[U-Net, FPN] sharing the EfficientNet-B<variant> encoder"""
    encoder = f"efficientnet-b{variant}"
    return [
        ModelSpec(architecture=Architecture.UNET, encoder=encoder, encoder_pretrained=pretrained, num_classes=num_classes),
        ModelSpec(architecture=Architecture.FPN, encoder=encoder, encoder_pretrained=pretrained, num_classes=num_classes),
    ]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_weights(model: SegModel, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Write the state dict and its sidecar JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path)

    meta = model.spec.sidecar()
    meta["created"] = datetime.now(timezone.utc).isoformat()
    meta["parameter_count"] = model.parameter_count
    meta["sha256"] = _sha256(path)
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.debug(f"💾 Saved {model.spec.display_name} to {path}")
    return path


def read_sidecar(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    meta_path = sidecar_path(path)
    if not meta_path.is_file():
        raise CorruptCheckpointError(f"{path}: sidecar {meta_path.name} is missing")
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise CorruptCheckpointError(f"{meta_path}: unreadable sidecar ({e})")


def load_weights(path: Union[str, Path], spec: Optional[ModelSpec] = None, device: Optional[torch.device] = None) -> SegModel:
    """
    Rebuild a model from a checkpoint written by save_weights

    Args:
        spec: expected spec; None trusts the sidecar
    """
    path = Path(path)
    meta = read_sidecar(path)
    try:
        stored = ModelSpec(**{k: meta[k] for k in ("architecture", "encoder", "num_classes")},
                           encoder_pretrained=meta.get("encoder_pretrained", False))
    except (KeyError, ValueError) as e:
        raise CorruptCheckpointError(f"{path}: invalid sidecar ({e})")

    if spec is not None and not spec.compatible_with(stored):
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint holds {stored.sidecar()} but {spec.sidecar()} was requested"
        )

    if meta.get("sha256") and meta["sha256"] != _sha256(path):
        raise CorruptCheckpointError(f"{path}: contents do not match the recorded checksum")

    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CorruptCheckpointError(f"{path}: cannot read weights ({e})")

    # weights are about to be overwritten, skip the download
    model = build_model(stored.model_copy(update={"encoder_pretrained": False}))
    model.spec = stored
    try:
        model.net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise IncompatibleCheckpointError(f"{path}: weights do not fit {stored.display_name} ({e})")

    model.eval()
    if device is not None:
        model.to(device)
    logger.info(f"📦 Loaded {stored.display_name} from {path}")
    return model
