"""
Evaluation
Per-split metric reports for a model or ensemble, result tables in the
Train/Valid/Test layout, and side-by-side mask overlays
"""
import json
import logging
import tempfile
from pathlib import Path
from typing import List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from pydantic import BaseModel

from data_ingest import SPLIT_NAMES, ClassTable, DatasetSplit, Sample
from ensemble import EnsembleModel, argmax_mask
from errors import DecodeError, EmptyDatasetError, EnsegError, OutputDirError, TableConsistencyError
from metrics import Coverage, MetricsAccumulator, MetricsConfig, MetricsReport, SampleFailure
from preprocess import PreprocessConfig, load_pair, resize_pair, to_tensors

logger = logging.getLogger(__name__)

TableMetric = Literal["iou", "dice_loss"]

METRIC_TITLES = {"iou": "IoU Score", "dice_loss": "Dice Loss"}


def model_name(model) -> str:
    if isinstance(model, EnsembleModel):
        return model.variant_name
    spec = getattr(model, "spec", None)
    return spec.display_name if spec is not None else type(model).__name__


def _device_of(model) -> torch.device:
    if isinstance(model, nn.Module):
        for param in model.parameters():
            return param.device
    return torch.device("cpu")


@torch.no_grad()
def predict(model, image: torch.Tensor) -> torch.Tensor:
    """(3, H, W) normalized input -> (C, H, W) probabilities on CPU"""
    if isinstance(model, nn.Module):
        model.eval()
    return model(image.unsqueeze(0).to(_device_of(model)))[0].cpu()


def accumulate(
    model,
    samples: Sequence[Sample],
    preprocess: PreprocessConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
) -> Tuple[MetricsAccumulator, Coverage]:
    """
    Run the model over samples one at a time (resize + normalize, no augmentation)

    Samples that fail to load are recorded in the coverage and skipped.
    """
    accumulator = MetricsAccumulator(model.num_classes, metrics_cfg)
    coverage = Coverage()
    for sample in samples:
        try:
            image, mask = load_pair(sample)
            image, mask = resize_pair(image, mask, preprocess)
            x, y = to_tensors(image, mask, preprocess)
        except (EnsegError, OSError) as e:
            logger.warning(f"⚠️ Skipping sample {sample.id}: {e}")
            coverage.failures.append(SampleFailure(id=sample.id, error=str(e)))
            continue
        accumulator.update(predict(model, x).unsqueeze(0), y.unsqueeze(0))
        coverage.n_samples += 1
    return accumulator, coverage


def evaluate(
    model,
    samples: Sequence[Sample],
    preprocess: PreprocessConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
    split_name: str = "test",
    class_names: Optional[Sequence[str]] = None,
    name: Optional[str] = None,
) -> MetricsReport:
    """Evaluate a model or ensemble on one list of samples"""
    if not samples:
        raise EmptyDatasetError(f"no samples to evaluate for split '{split_name}'")

    accumulator, coverage = accumulate(model, samples, preprocess, metrics_cfg)
    report = MetricsReport(
        model=name or model_name(model),
        aggregation=metrics_cfg.aggregation,
        threshold=metrics_cfg.threshold,
        smooth=metrics_cfg.smooth,
        coverage={split_name: coverage},
    )
    if accumulator.n_samples:
        metrics = accumulator.split_metrics()
        report.per_split[split_name] = metrics
        report.per_class[split_name] = accumulator.class_metrics(class_names)
        logger.info(
            f"📊 {report.model} [{split_name}] iou {metrics.iou:.4f} "
            f"dice {metrics.dice_loss:.4f} f1 {metrics.f1:.4f} ({accumulator.n_samples} samples)"
        )
    if not coverage.complete:
        logger.warning(f"⚠️ {report.model} [{split_name}]: {len(coverage.failures)} samples could not be evaluated")
    return report


def evaluate_splits(
    model,
    split: DatasetSplit,
    preprocess: PreprocessConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
    class_names: Optional[Sequence[str]] = None,
    name: Optional[str] = None,
) -> MetricsReport:
    """One report covering every non-empty split part"""
    report = None
    for split_name in SPLIT_NAMES:
        part = split.part(split_name)
        if not part:
            continue
        current = evaluate(model, part, preprocess, metrics_cfg, split_name, class_names, name)
        report = current if report is None else report.merged_with(current)
    if report is None:
        raise EmptyDatasetError("every split is empty")
    return report


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

class TableRow(BaseModel):
    model: str
    values: List[Optional[float]]


class ResultsTable(BaseModel):
    metric: TableMetric
    splits: List[str]
    rows: List[TableRow]

    def to_json(self) -> dict:
        return self.model_dump()

    def to_text(self) -> str:
        header = ["Model"] + [s.capitalize() for s in self.splits]
        body = [
            [row.model] + ["-" if v is None else f"{v:.4f}" for v in row.values]
            for row in self.rows
        ]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

        def _line(cells):
            return "  ".join(
                cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(cells)
            )

        rule = "-" * len(_line(header))
        lines = [METRIC_TITLES[self.metric], rule, _line(header), rule]
        lines += [_line(cells) for cells in body]
        lines.append(rule)
        return "\n".join(lines)


def build_results_table(reports: Mapping[str, MetricsReport], metric: TableMetric = "iou") -> ResultsTable:
    """
    Rows in the given model order, one column per split (train, valid, test order)
    """
    if metric not in METRIC_TITLES:
        raise TableConsistencyError(f"unknown table metric '{metric}'")
    if not reports:
        raise TableConsistencyError("no reports to tabulate")

    coverage = {name: set(r.per_split) for name, r in reports.items()}
    first_name, first = next(iter(coverage.items()))
    for name, splits in coverage.items():
        if splits != first:
            raise TableConsistencyError(
                f"'{name}' covers {sorted(splits)} but '{first_name}' covers {sorted(first)}"
            )

    splits = [s for s in SPLIT_NAMES if s in first] + sorted(s for s in first if s not in SPLIT_NAMES)
    rows = [
        TableRow(model=name, values=[getattr(report.per_split[s], metric) for s in splits])
        for name, report in reports.items()
    ]
    return ResultsTable(metric=metric, splits=splits, rows=rows)


def save_table(table: ResultsTable, out_dir: Union[str, Path], stem: Optional[str] = None) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"table_{table.metric}"
    json_path = out_dir / f"{stem}.json"
    text_path = out_dir / f"{stem}.txt"
    json_path.write_text(json.dumps(table.to_json(), indent=2), encoding="utf-8")
    text_path.write_text(table.to_text() + "\n", encoding="utf-8")
    return json_path, text_path


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

def colorize(mask: Union[np.ndarray, torch.Tensor], class_table: ClassTable) -> np.ndarray:
    """(H, W) class ids -> (H, W, 3) uint8 using the class table colors"""
    palette = np.asarray(class_table.colors, dtype=np.uint8)
    return palette[np.asarray(mask, dtype=np.int64)]


def _ensure_writable(out_dir: Path):
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir):
            pass
    except OSError as e:
        raise OutputDirError(f"cannot write overlays to {out_dir}: {e}")


def export_overlays(
    model,
    samples: Sequence[Sample],
    class_table: ClassTable,
    out_dir: Union[str, Path],
    preprocess: PreprocessConfig = PreprocessConfig(),
) -> List[Path]:
    """
    Write <id>.png per sample: input | colorized truth | colorized prediction
    """
    out_dir = Path(out_dir)
    _ensure_writable(out_dir)

    written = []
    for sample in samples:
        try:
            image, mask = load_pair(sample)
        except DecodeError as e:
            logger.warning(f"⚠️ Skipping overlay for {sample.id}: {e}")
            continue
        image, mask = resize_pair(image, mask, preprocess)
        x, _ = to_tensors(image, mask, preprocess)
        pred = argmax_mask(predict(model, x)).numpy()
        composite = np.concatenate(
            [image, colorize(mask, class_table), colorize(pred, class_table)], axis=1
        )
        path = out_dir / f"{sample.id}.png"
        Image.fromarray(composite.astype(np.uint8)).save(path)
        written.append(path)

    logger.info(f"🖼️ Wrote {len(written)} overlays to {out_dir}")
    return written
