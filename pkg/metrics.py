"""
Segmentation metrics
IoU and F1 at a probability threshold (micro or macro over classes), soft
Dice loss, and the report types that carry them
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import DEFAULTS
from errors import ConfigError, MetricShapeError

logger = logging.getLogger(__name__)

TensorLike = Union[torch.Tensor, np.ndarray]


class Aggregation(str, Enum):
    MICRO = "micro"
    MACRO = "macro"


class MetricsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold: float = DEFAULTS["threshold"]
    aggregation: Aggregation = Aggregation(DEFAULTS["aggregation"])
    smooth: float = DEFAULTS["smooth"]
    classes: Optional[Tuple[int, ...]] = None  # None = every class, background included

    @field_validator("threshold")
    @classmethod
    def _threshold(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {value}")
        return value

    @field_validator("smooth")
    @classmethod
    def _smooth(cls, value):
        if value < 0:
            raise ValueError(f"smooth must be >= 0, got {value}")
        return value


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

def _batched(pred: TensorLike, truth: TensorLike) -> Tuple[torch.Tensor, torch.Tensor]:
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth)
    if pred.ndim == 3:
        pred = pred.unsqueeze(0)
    if truth.ndim == 2:
        truth = truth.unsqueeze(0)
    if pred.ndim != 4 or truth.ndim != 3 or pred.shape[0] != truth.shape[0] or pred.shape[2:] != truth.shape[1:]:
        raise MetricShapeError(
            f"prediction {tuple(pred.shape)} does not match truth {tuple(truth.shape)} "
            "(expected (N, C, H, W) and (N, H, W))"
        )
    truth = truth.long()
    if truth.numel() and (truth.min() < 0 or truth.max() >= pred.shape[1]):
        raise MetricShapeError(f"truth holds class ids outside 0..{pred.shape[1] - 1}")
    return pred, truth


def one_hot(truth: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W) class ids -> (N, C, H, W) one-hot"""
    return F.one_hot(truth, num_classes).permute(0, 3, 1, 2).to(dtype)


# ---------------------------------------------------------------------------
# Confusion counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class pixel counts, int64 tensors of shape (C,)"""

    tp: torch.Tensor
    fp: torch.Tensor
    fn: torch.Tensor
    tn: torch.Tensor

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = torch.zeros(num_classes, dtype=torch.int64)
        return cls(z.clone(), z.clone(), z.clone(), z.clone())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def num_classes(self) -> int:
        return int(self.tp.shape[0])

    def select(self, classes: Optional[Sequence[int]]) -> "ConfusionCounts":
        if classes is None:
            return self
        idx = torch.as_tensor(list(classes), dtype=torch.long)
        return ConfusionCounts(self.tp[idx], self.fp[idx], self.fn[idx], self.tn[idx])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tp", "fp", "fn", "tn")}


def _counts_from_binary(pred_bin: torch.Tensor, gt: torch.Tensor) -> ConfusionCounts:
    dims = (0, 2, 3)
    return ConfusionCounts(
        tp=(pred_bin & gt).sum(dim=dims).cpu().long(),
        fp=(pred_bin & ~gt).sum(dim=dims).cpu().long(),
        fn=(~pred_bin & gt).sum(dim=dims).cpu().long(),
        tn=(~pred_bin & ~gt).sum(dim=dims).cpu().long(),
    )


def confusion_counts(pred: TensorLike, truth: TensorLike, threshold: float = DEFAULTS["threshold"]) -> ConfusionCounts:
    """Binarize each class channel at threshold and compare with the one-hot truth"""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0,1), got {threshold}")
    pred, truth = _batched(pred, truth)
    gt = one_hot(truth, pred.shape[1], dtype=torch.bool)
    return _counts_from_binary(pred >= threshold, gt)


def mask_confusion_counts(pred_mask: TensorLike, truth: TensorLike, num_classes: int) -> ConfusionCounts:
    """Counts for a hard (argmax) mask against the truth"""
    pred_mask = torch.as_tensor(pred_mask).long()
    truth = torch.as_tensor(truth).long()
    if pred_mask.ndim == 2:
        pred_mask = pred_mask.unsqueeze(0)
    if truth.ndim == 2:
        truth = truth.unsqueeze(0)
    if pred_mask.shape != truth.shape:
        raise MetricShapeError(f"mask {tuple(pred_mask.shape)} does not match truth {tuple(truth.shape)}")
    return _counts_from_binary(
        one_hot(pred_mask, num_classes, dtype=torch.bool),
        one_hot(truth, num_classes, dtype=torch.bool),
    )


def _ratio(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # a class absent from both prediction and truth scores 1.0
    num = num.double()
    den = den.double()
    return torch.where(den > 0, num / den.clamp(min=1), torch.ones_like(den))


def iou_from_counts(counts: ConfusionCounts, aggregation: Aggregation = Aggregation.MICRO) -> float:
    if Aggregation(aggregation) == Aggregation.MICRO:
        return float(_ratio(counts.tp.sum(), (counts.tp + counts.fp + counts.fn).sum()))
    return float(_ratio(counts.tp, counts.tp + counts.fp + counts.fn).mean())


def f1_from_counts(counts: ConfusionCounts, aggregation: Aggregation = Aggregation.MICRO) -> float:
    if Aggregation(aggregation) == Aggregation.MICRO:
        return float(_ratio(2 * counts.tp.sum(), (2 * counts.tp + counts.fp + counts.fn).sum()))
    return float(_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn).mean())


def per_class_iou(counts: ConfusionCounts) -> List[float]:
    return _ratio(counts.tp, counts.tp + counts.fp + counts.fn).tolist()


def per_class_f1(counts: ConfusionCounts) -> List[float]:
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn).tolist()


def iou_score(
    pred: TensorLike,
    truth: TensorLike,
    threshold: float = DEFAULTS["threshold"],
    aggregation: Aggregation = Aggregation.MICRO,
    classes: Optional[Sequence[int]] = None,
) -> float:
    """
    Intersection over union of the thresholded prediction and the one-hot truth

    MICRO pools TP/FP/FN over the selected classes before dividing;
    MACRO averages the per-class IoU.
    """
    counts = confusion_counts(pred, truth, threshold).select(classes)
    return iou_from_counts(counts, aggregation)


def f1_score(
    pred: TensorLike,
    truth: TensorLike,
    threshold: float = DEFAULTS["threshold"],
    aggregation: Aggregation = Aggregation.MICRO,
    classes: Optional[Sequence[int]] = None,
) -> float:
    """F1 = 2TP / (2TP + FP + FN) under the chosen aggregation"""
    counts = confusion_counts(pred, truth, threshold).select(classes)
    return f1_from_counts(counts, aggregation)


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_terms(pred: torch.Tensor, truth: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-class sums (sum p*g, sum p, sum g) over batch and pixels"""
    pred, truth = _batched(pred, truth)
    gt = one_hot(truth, pred.shape[1], dtype=pred.dtype)
    dims = (0, 2, 3)
    return (pred * gt).sum(dim=dims), pred.sum(dim=dims), gt.sum(dim=dims)


def dice_from_terms(intersection, pred_sum, truth_sum, smooth: float = DEFAULTS["smooth"]):
    return 1.0 - (2.0 * intersection + smooth) / (pred_sum + truth_sum + smooth)


def dice_loss(pred: TensorLike, truth: TensorLike, smooth: float = DEFAULTS["smooth"]) -> torch.Tensor:
    """
    Soft Dice loss over all pixels and classes against the one-hot truth:
    1 - (2 * sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)

    Returns a scalar tensor that keeps the autograd graph of pred.
    """
    intersection, pred_sum, truth_sum = dice_terms(torch.as_tensor(pred), truth)
    return dice_from_terms(intersection.sum(), pred_sum.sum(), truth_sum.sum(), smooth)


class DiceLoss(nn.Module):
    """Training criterion on softmax outputs"""

    def __init__(self, smooth: float = DEFAULTS["smooth"]):
        super().__init__()
        self.smooth = smooth

    def forward(self, pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
        return dice_loss(pred, truth, self.smooth)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _unit(value: Optional[float]) -> Optional[float]:
    if value is not None and not 0.0 <= value <= 1.0:
        raise ValueError(f"metric value must be in [0,1], got {value}")
    return value


class ClassMetrics(BaseModel):
    iou: float
    dice_loss: float
    f1: float

    @field_validator("iou", "dice_loss", "f1")
    @classmethod
    def _in_unit_range(cls, value):
        return _unit(value)


class SplitMetrics(BaseModel):
    """Primary values (iou, f1 under the report aggregation) plus both aggregations and the argmax path"""

    iou: float
    dice_loss: float
    f1: Optional[float] = None
    iou_micro: Optional[float] = None
    iou_macro: Optional[float] = None
    f1_micro: Optional[float] = None
    f1_macro: Optional[float] = None
    argmax_iou: Optional[float] = None
    argmax_f1: Optional[float] = None
    n_samples: int = 0

    @field_validator(
        "iou", "dice_loss", "f1", "iou_micro", "iou_macro", "f1_micro", "f1_macro", "argmax_iou", "argmax_f1"
    )
    @classmethod
    def _in_unit_range(cls, value):
        return _unit(value)


class SampleFailure(BaseModel):
    id: str
    error: str


class Coverage(BaseModel):
    n_samples: int = 0
    failures: List[SampleFailure] = Field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures


class MetricsReport(BaseModel):
    model: str
    aggregation: Aggregation = Aggregation.MICRO
    threshold: float = DEFAULTS["threshold"]
    smooth: float = DEFAULTS["smooth"]
    per_split: Dict[str, SplitMetrics] = Field(default_factory=dict)
    per_class: Dict[str, Dict[str, ClassMetrics]] = Field(default_factory=dict)
    coverage: Dict[str, Coverage] = Field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(c.complete for c in self.coverage.values())

    def merged_with(self, other: "MetricsReport") -> "MetricsReport":
        """Combine reports of the same model over different splits"""
        return self.model_copy(update={
            "per_split": {**self.per_split, **other.per_split},
            "per_class": {**self.per_class, **other.per_class},
            "coverage": {**self.coverage, **other.coverage},
        })


def save_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


class MetricsAccumulator:
    """
    Running sums over a dataset: threshold confusion counts, argmax confusion
    counts and per-class soft-dice terms. Accumulators merge with +.
    """

    def __init__(self, num_classes: int, cfg: MetricsConfig = MetricsConfig()):
        self.num_classes = num_classes
        self.cfg = cfg
        self.counts = ConfusionCounts.zeros(num_classes)
        self.argmax_counts = ConfusionCounts.zeros(num_classes)
        self.intersection = torch.zeros(num_classes, dtype=torch.float64)
        self.pred_sum = torch.zeros(num_classes, dtype=torch.float64)
        self.truth_sum = torch.zeros(num_classes, dtype=torch.float64)
        self.n_samples = 0

    @torch.no_grad()
    def update(self, pred: torch.Tensor, truth: torch.Tensor):
        pred, truth = _batched(pred, truth)
        if pred.shape[1] != self.num_classes:
            raise MetricShapeError(f"prediction has {pred.shape[1]} classes, expected {self.num_classes}")
        self.counts = self.counts + confusion_counts(pred, truth, self.cfg.threshold)
        self.argmax_counts = self.argmax_counts + mask_confusion_counts(pred.argmax(dim=1), truth, self.num_classes)
        inter, p_sum, g_sum = dice_terms(pred.double(), truth)
        self.intersection += inter.cpu()
        self.pred_sum += p_sum.cpu()
        self.truth_sum += g_sum.cpu()
        self.n_samples += pred.shape[0]

    def __add__(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        merged = MetricsAccumulator(self.num_classes, self.cfg)
        merged.counts = self.counts + other.counts
        merged.argmax_counts = self.argmax_counts + other.argmax_counts
        merged.intersection = self.intersection + other.intersection
        merged.pred_sum = self.pred_sum + other.pred_sum
        merged.truth_sum = self.truth_sum + other.truth_sum
        merged.n_samples = self.n_samples + other.n_samples
        return merged

    def _selected(self, tensor: torch.Tensor) -> torch.Tensor:
        if self.cfg.classes is None:
            return tensor
        return tensor[list(self.cfg.classes)]

    def dice_loss(self) -> float:
        value = dice_from_terms(
            self._selected(self.intersection).sum(),
            self._selected(self.pred_sum).sum(),
            self._selected(self.truth_sum).sum(),
            self.cfg.smooth,
        )
        return float(value.clamp(0.0, 1.0))

    def iou(self) -> float:
        return iou_from_counts(self.counts.select(self.cfg.classes), self.cfg.aggregation)

    def split_metrics(self) -> SplitMetrics:
        counts = self.counts.select(self.cfg.classes)
        hard = self.argmax_counts.select(self.cfg.classes)
        return SplitMetrics(
            iou=iou_from_counts(counts, self.cfg.aggregation),
            dice_loss=self.dice_loss(),
            f1=f1_from_counts(counts, self.cfg.aggregation),
            iou_micro=iou_from_counts(counts, Aggregation.MICRO),
            iou_macro=iou_from_counts(counts, Aggregation.MACRO),
            f1_micro=f1_from_counts(counts, Aggregation.MICRO),
            f1_macro=f1_from_counts(counts, Aggregation.MACRO),
            argmax_iou=iou_from_counts(hard, self.cfg.aggregation),
            argmax_f1=f1_from_counts(hard, self.cfg.aggregation),
            n_samples=self.n_samples,
        )

    def class_metrics(self, class_names: Optional[Sequence[str]] = None) -> Dict[str, ClassMetrics]:
        names = list(class_names) if class_names else [str(c) for c in range(self.num_classes)]
        ious = per_class_iou(self.counts)
        f1s = per_class_f1(self.counts)
        dices = dice_from_terms(self.intersection, self.pred_sum, self.truth_sum, self.cfg.smooth).clamp(0.0, 1.0)
        return {
            names[c]: ClassMetrics(iou=ious[c], dice_loss=float(dices[c]), f1=f1s[c])
            for c in range(self.num_classes)
        }
