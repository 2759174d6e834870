"""
Training loop
Adam on soft Dice loss, per-epoch validation with batch size 1, and the
checkpoint with the best validation IoU kept as best.ckpt
"""
import copy
import json
import logging
import math
import time
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.nn.modules.batchnorm import _BatchNorm
from torch.utils.data import DataLoader
from tqdm import tqdm

from config import Config, DEFAULTS
from data_ingest import DatasetSplit
from errors import ConfigError, DivergenceError, EmptyDatasetError, EnsegError, ResourceError
from metrics import DiceLoss, MetricsAccumulator, MetricsConfig
from model_zoo import ModelSpec, SegModel, build_model, resolve_device, save_weights
from preprocess import PreprocessConfig, SegmentationDataset

logger = logging.getLogger(__name__)

T = TypeVar("T")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(DEFAULTS["learning_rate"], ge=0.0)
    train_batch_size: int = Field(DEFAULTS["train_batch_size"], ge=1)
    valid_batch_size: int = Field(DEFAULTS["valid_batch_size"], ge=1)
    epochs: int = Field(DEFAULTS["epochs"], ge=1)
    seed: int = DEFAULTS["seed"]
    shuffle_train: bool = DEFAULTS["shuffle_train"]
    checkpoint_dir: Path = Path(DEFAULTS["output_root"]) / DEFAULTS["run_name"]
    select_metric: Literal["iou_valid"] = "iou_valid"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    divergence_patience: int = Field(DEFAULTS["divergence_patience"], ge=1)
    save_every_epoch: bool = True
    device: Optional[str] = None


class EpochRecord(BaseModel):
    epoch: int
    train_dice_loss: float = Field(ge=0.0, le=1.0)
    train_iou: float = Field(ge=0.0, le=1.0)
    valid_dice_loss: Optional[float] = Field(None, ge=0.0, le=1.0)
    valid_iou: Optional[float] = Field(None, ge=0.0, le=1.0)
    wall_seconds: float


def make_batches(samples: Sequence[T], batch_size: int, shuffle: bool = False, seed: int = 0) -> List[List[T]]:
    """
    Group samples into ceil(n / batch_size) batches, the last one possibly short

    Without shuffle the batch order is the input order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(samples) == 0:
        raise EmptyDatasetError("cannot batch an empty sample list")
    items = list(samples)
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(items))
        items = [items[i] for i in order]
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def write_history(records: Sequence[EpochRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
    return path


def read_history(path: Union[str, Path]) -> List[EpochRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EpochRecord.model_validate(json.loads(line)) for line in lines if line.strip()]


def _is_oom(error: BaseException) -> bool:
    oom_type = getattr(torch.cuda, "OutOfMemoryError", None)
    return (oom_type is not None and isinstance(error, oom_type)) or "out of memory" in str(error).lower()


def _freeze_norm_stats(model: torch.nn.Module):
    """Keep BatchNorm running statistics fixed while the rest of the model trains"""
    for module in model.modules():
        if isinstance(module, _BatchNorm):
            module.eval()


def _loader(dataset, batches: List[List[int]]) -> DataLoader:
    return DataLoader(dataset, batch_sampler=batches, num_workers=Config.NUM_WORKERS)


def _run_epoch(
    model: SegModel,
    loader: DataLoader,
    criterion: DiceLoss,
    accumulator: MetricsAccumulator,
    device: torch.device,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    patience: int,
    desc: str,
    freeze_norm: bool = False,
) -> float:
    """One pass; trains when an optimizer is given. Returns the sample-weighted mean loss"""
    total_loss, total_samples, bad_streak = 0.0, 0, 0
    training = optimizer is not None
    model.train(training)
    if training and freeze_norm:
        _freeze_norm_stats(model)

    with torch.set_grad_enabled(training):
        for batch_idx, (images, masks) in enumerate(tqdm(loader, desc=desc, leave=False, disable=None)):
            images = images.to(device)
            masks = masks.to(device)
            try:
                probs = model(images)
                loss = criterion(probs, masks)
                if not torch.isfinite(loss):
                    bad_streak += 1
                    logger.warning(f"⚠️ Non-finite loss at epoch {epoch}, batch {batch_idx}")
                    if bad_streak >= patience:
                        raise DivergenceError(epoch, batch_idx)
                    continue
                bad_streak = 0
                if training:
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
            except RuntimeError as e:
                if _is_oom(e):
                    raise ResourceError(
                        f"out of memory at epoch {epoch}, batch {batch_idx} "
                        f"with batch size {images.shape[0]}; lower the batch size"
                    )
                raise

            accumulator.update(probs.detach(), masks)
            total_loss += float(loss.detach()) * images.shape[0]
            total_samples += images.shape[0]

    return total_loss / total_samples if total_samples else float("nan")


def train(
    model: SegModel,
    split: DatasetSplit,
    cfg: TrainConfig,
    preprocess: PreprocessConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
) -> Tuple[SegModel, List[EpochRecord]]:
    """
    Train one model and keep the checkpoint with the highest validation IoU

    Writes <checkpoint_dir>/epoch_<k>.ckpt, best.ckpt and history.jsonl.

    Returns:
        (model holding the best weights, one EpochRecord per epoch)
    """
    if not split.train:
        raise EmptyDatasetError("training split is empty")
    if cfg.learning_rate == 0:
        logger.warning("⚠️ learning_rate is 0, parameters and normalization statistics will not change")

    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False

    run_dir = Path(cfg.checkpoint_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    history_path = run_dir / "history.jsonl"
    history_path.write_text("", encoding="utf-8")

    model.to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    criterion = DiceLoss(metrics_cfg.smooth)
    train_ds = SegmentationDataset(split.train, preprocess, train=True)
    valid_ds = SegmentationDataset(split.valid, preprocess, train=False)
    select_on = "valid_iou" if split.valid else "train_iou"
    if not split.valid:
        logger.warning("⚠️ Validation split is empty, selecting the best epoch on train IoU")

    logger.info(
        f"🚀 Training {model.spec.display_name} on {len(split.train)} samples "
        f"({cfg.epochs} epochs, lr {cfg.learning_rate}, batch {cfg.train_batch_size}, device {device})"
    )

    history: List[EpochRecord] = []
    best_score, best_state, best_epoch = -math.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        train_ds.set_epoch(epoch)
        batches = make_batches(range(len(train_ds)), cfg.train_batch_size, cfg.shuffle_train, cfg.seed + epoch)
        train_acc = MetricsAccumulator(model.num_classes, metrics_cfg)
        train_loss = _run_epoch(
            model, _loader(train_ds, batches), criterion, train_acc, device, optimizer,
            epoch, cfg.divergence_patience, f"Epoch {epoch}/{cfg.epochs} train",
            freeze_norm=cfg.learning_rate == 0,
        )
        if math.isnan(train_loss):
            # every batch of the epoch was skipped as non-finite
            raise DivergenceError(epoch, len(batches) - 1)

        valid_loss = valid_iou = None
        if split.valid:
            valid_acc = MetricsAccumulator(model.num_classes, metrics_cfg)
            valid_batches = make_batches(range(len(valid_ds)), cfg.valid_batch_size)
            valid_loss = _run_epoch(
                model, _loader(valid_ds, valid_batches), criterion, valid_acc, device, None,
                epoch, cfg.divergence_patience, f"Epoch {epoch}/{cfg.epochs} valid",
            )
            valid_iou = valid_acc.iou()

        record = EpochRecord(
            epoch=epoch,
            train_dice_loss=min(max(train_loss, 0.0), 1.0),
            train_iou=train_acc.iou(),
            valid_dice_loss=None if valid_loss is None else min(max(valid_loss, 0.0), 1.0),
            valid_iou=valid_iou,
            wall_seconds=time.perf_counter() - started,
        )
        history.append(record)
        with open(history_path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")

        logger.info(
            f"📊 Epoch {epoch}: train dice {record.train_dice_loss:.4f} iou {record.train_iou:.4f}"
            + (f" | valid dice {record.valid_dice_loss:.4f} iou {record.valid_iou:.4f}" if split.valid else "")
        )

        if cfg.save_every_epoch:
            save_weights(model, run_dir / f"epoch_{epoch}.ckpt", extra={"epoch": epoch})

        score = getattr(record, select_on)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(model.net.state_dict())
            save_weights(model, run_dir / "best.ckpt", extra={"epoch": epoch, select_on: score})
            logger.info(f"💾 New best {select_on} {score:.4f} at epoch {epoch}")

    model.net.load_state_dict(best_state)
    model.eval()
    logger.info(f"✅ Training finished, best {select_on} {best_score:.4f} at epoch {best_epoch}")
    return model, history


def member_dir_name(index: int, spec: ModelSpec) -> str:
    return f"member_{index}_{spec.architecture.value}_{spec.encoder}"


def train_ensemble_members(
    specs: Sequence[ModelSpec],
    split: DatasetSplit,
    cfg: TrainConfig,
    preprocess: PreprocessConfig,
    metrics_cfg: MetricsConfig = MetricsConfig(),
) -> List[SegModel]:
    """
    Train each member independently with the same config and data order;
    fusion happens only at inference
    """
    if not specs:
        raise ConfigError("no ensemble members to train")
    classes = {s.num_classes for s in specs}
    if len(classes) != 1:
        raise ConfigError(f"ensemble members disagree on num_classes: {sorted(classes)}")

    members = []
    for index, spec in enumerate(specs):
        member_cfg = cfg.model_copy(update={"checkpoint_dir": Path(cfg.checkpoint_dir) / member_dir_name(index, spec)})
        logger.info(f"👥 Member {index}: {spec.display_name}")
        try:
            model = build_model(spec, seed=cfg.seed)
            model, _ = train(model, split, member_cfg, preprocess, metrics_cfg)
        except DivergenceError as e:
            raise DivergenceError(e.epoch, e.batch, member=index)
        except EnsegError as e:
            e.message = f"member {index}: {e.message}"
            e.args = (e.message,)
            raise
        members.append(model)
    return members
