"""
Ensemble fusion
Members are trained independently; their softmax maps are combined at
inference by equal (or configured) weighted averaging
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, field_validator

from config import Config, DEFAULTS
from errors import ConfigError, EnsegError, FusionShapeError, MemberForwardError
from model_zoo import INPUT_STRIDE, SegModel, el_variant_name, load_weights

logger = logging.getLogger(__name__)

MapLike = Union[torch.Tensor, np.ndarray]


class FusionMethod(str, Enum):
    WEIGHTED_AVERAGE = "weighted_average"
    ELEMENTWISE_SUM = "elementwise_sum"


class FusionSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: FusionMethod = FusionMethod(DEFAULTS["fusion_method"])
    weights: Optional[Tuple[float, ...]] = None  # None means equal weights

    @field_validator("method", mode="before")
    @classmethod
    def _lower(cls, value):
        return value.lower() if isinstance(value, str) else value

    @field_validator("weights")
    @classmethod
    def _positive(cls, value):
        if value is not None and any(not w > 0 or not math.isfinite(w) for w in value):
            raise ValueError(f"fusion weights must be finite and > 0, got {value}")
        return value

    def resolved_weights(self, members: int) -> Tuple[float, ...]:
        if self.weights is None:
            return (1.0,) * members
        if len(self.weights) != members:
            raise ConfigError(f"{len(self.weights)} fusion weights given for {members} members")
        return self.weights


def fuse(maps: Sequence[MapLike], spec: FusionSpec = FusionSpec()) -> torch.Tensor:
    """
    Combine probability maps of identical shape into one probability map

    WEIGHTED_AVERAGE: sum_i w_i * map_i / sum_i w_i
    ELEMENTWISE_SUM:  sum_i map_i, renormalized by the member count
    """
    if not maps:
        raise FusionShapeError("no maps to fuse")
    tensors = [torch.as_tensor(m) for m in maps]
    shape = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.shape != shape:
            raise FusionShapeError(f"map {i} has shape {tuple(t.shape)}, map 0 has {tuple(shape)}")

    stacked = torch.stack(tensors)
    if spec.method == FusionMethod.ELEMENTWISE_SUM:
        return stacked.sum(dim=0) / len(tensors)

    weights = torch.tensor(spec.resolved_weights(len(tensors)), dtype=stacked.dtype, device=stacked.device)
    weights = weights / weights.sum()
    weights = weights.view(-1, *([1] * len(shape)))
    return (stacked * weights).sum(dim=0)


def argmax_mask(prob_map: MapLike) -> torch.Tensor:
    """Class index of the highest probability per pixel; ties go to the lowest index"""
    prob_map = torch.as_tensor(prob_map)
    class_dim = 1 if prob_map.ndim == 4 else 0
    return torch.argmax(prob_map, dim=class_dim)


class EnsembleModel(nn.Module):
    """Ordered member models plus the fusion applied to their outputs"""

    def __init__(self, members: Sequence[SegModel], fusion: FusionSpec = FusionSpec(), variant_name: Optional[str] = None):
        super().__init__()
        if len(members) < 2:
            raise ConfigError(f"an ensemble needs at least 2 members, got {len(members)}")
        classes = {m.num_classes for m in members}
        if len(classes) != 1:
            raise ConfigError(f"ensemble members disagree on num_classes: {sorted(classes)}")
        fusion.resolved_weights(len(members))

        self.members = nn.ModuleList(members)
        self.fusion = fusion
        self.variant_name = variant_name or el_variant_name(members[0].spec.encoder)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    @property
    def input_stride(self) -> int:
        return math.lcm(*(INPUT_STRIDE[m.spec.architecture] for m in self.members))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return predict_ensemble(self, x)


def _run_member(index: int, member: SegModel, image: torch.Tensor) -> torch.Tensor:
    try:
        return member(image)
    except EnsegError as e:
        raise MemberForwardError(index, e)
    except RuntimeError as e:
        raise MemberForwardError(index, e)


def predict_ensemble(ensemble: EnsembleModel, image: torch.Tensor, threads: Optional[int] = None) -> torch.Tensor:
    """
    Run every member on the same normalized input and fuse the results

    Args:
        image: (3, H, W) or (N, 3, H, W)
        threads: members evaluated concurrently when > 1; output is merged in member order
    """
    batched = image.ndim == 4
    x = image if batched else image.unsqueeze(0)
    threads = threads or Config.ENSEMBLE_THREADS
    members = list(ensemble.members)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_member, i, m, x) for i, m in enumerate(members)]
            maps = [f.result() for f in futures]
    else:
        maps = [_run_member(i, m, x) for i, m in enumerate(members)]

    fused = fuse(maps, ensemble.fusion)
    return fused if batched else fused.squeeze(0)


def load_ensemble(
    checkpoints: Sequence[Union[str, Path]],
    fusion: FusionSpec = FusionSpec(),
    variant_name: Optional[str] = None,
    device: Optional[torch.device] = None,
) -> EnsembleModel:
    members: List[SegModel] = [load_weights(p, device=device) for p in checkpoints]
    ensemble = EnsembleModel(members, fusion, variant_name)
    ensemble.eval()
    logger.info(
        f"🤝 Ensemble {ensemble.variant_name}: "
        f"{', '.join(m.spec.display_name for m in members)} ({fusion.method.value})"
    )
    return ensemble
