"""
Experiment configuration
The JSON file describing one run, parsed into pydantic models with every
default made explicit
"""
import json
import logging
import re
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from config import DEFAULTS
from data_ingest import ClassTable, load_class_table
from ensemble import FusionSpec
from errors import ConfigError
from metrics import MetricsConfig
from model_zoo import ModelSpec, ensemble_member_specs
from preprocess import PreprocessConfig
from training import TrainConfig

logger = logging.getLogger(__name__)


class SplitSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["predefined", "ratio"] = "predefined"
    ratios: Tuple[float, float, float] = DEFAULTS["split_ratios"]
    seed: int = DEFAULTS["split_seed"]

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, value):
        if any(r <= 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"ratios must be positive and sum to 1, got {value}")
        return value


class DatasetSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: Path
    class_table: Path
    split: SplitSection = SplitSection()


class EnsembleSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: Optional[str] = None  # "EL-k" expands to [U-Net, FPN] on EfficientNet-Bk
    members: Optional[List[ModelSpec]] = None
    encoder_pretrained: bool = DEFAULTS["encoder_pretrained"]
    num_classes: Optional[int] = None
    fusion: FusionSpec = FusionSpec()

    @model_validator(mode="after")
    def _expand(self):
        if self.members is None:
            if self.variant is None:
                raise ValueError("give either 'members' or 'variant'")
            match = re.fullmatch(r"EL-([0-4])", self.variant)
            if not match:
                raise ValueError(f"variant must look like 'EL-k' with k in 0..4, got '{self.variant}'")
            if self.num_classes is None:
                raise ValueError("num_classes is required to expand a variant")
            self.members = ensemble_member_specs(int(match.group(1)), self.num_classes, self.encoder_pretrained)
        if len(self.members) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(self.members)}")
        self.num_classes = self.members[0].num_classes
        self.fusion.resolved_weights(len(self.members))
        return self


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: Path = Path(DEFAULTS["output_root"])
    run_name: str = DEFAULTS["run_name"]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetSection
    preprocess: PreprocessConfig = PreprocessConfig()
    model: Optional[ModelSpec] = None
    ensemble: Optional[EnsembleSection] = None
    train: TrainConfig = TrainConfig()
    metrics: MetricsConfig = MetricsConfig()
    output: OutputSection = OutputSection()

    @model_validator(mode="before")
    @classmethod
    def _augment_default(cls, data):
        # augmentation is on unless the file sets "augment": null
        if isinstance(data, dict):
            preprocess = dict(data.get("preprocess") or {})
            preprocess.setdefault("augment", {})
            data = {**data, "preprocess": preprocess}
        return data

    @model_validator(mode="after")
    def _one_model(self):
        if (self.model is None) == (self.ensemble is None):
            raise ValueError("exactly one of 'model' or 'ensemble' must be given")
        run_dir = self.output.root / self.output.run_name
        if self.train.checkpoint_dir != run_dir:
            self.train = self.train.model_copy(update={"checkpoint_dir": run_dir})
        return self

    @property
    def run_dir(self) -> Path:
        return self.output.root / self.output.run_name

    @property
    def num_classes(self) -> int:
        return self.model.num_classes if self.model is not None else self.ensemble.num_classes

    def member_specs(self) -> List[ModelSpec]:
        return [self.model] if self.model is not None else list(self.ensemble.members)


def format_validation_error(error: ValidationError) -> str:
    """One 'field.path: message' entry per problem, joined on one line"""
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


def _inject_num_classes(raw: dict, num_classes: int) -> dict:
    raw = dict(raw)
    if isinstance(raw.get("model"), dict):
        raw["model"] = {"num_classes": num_classes, **raw["model"]}
    if isinstance(raw.get("ensemble"), dict):
        ensemble = {"num_classes": num_classes, **raw["ensemble"]}
        if isinstance(ensemble.get("members"), list):
            ensemble["members"] = [
                {"num_classes": num_classes, **m} if isinstance(m, dict) else m for m in ensemble["members"]
            ]
        raw["ensemble"] = ensemble
    return raw


def _under(base_dir: Path, path: Path) -> Path:
    return path if path.is_absolute() else base_dir / path


def parse_experiment(raw: dict, base_dir: Optional[Path] = None) -> Tuple[ExperimentConfig, ClassTable]:
    """Validate a raw config dict; relative dataset and output paths resolve against base_dir"""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: experiment config must be a JSON object")
    dataset = raw.get("dataset")
    if not isinstance(dataset, dict) or "class_table" not in dataset:
        raise ConfigError("dataset.class_table: Field required")

    table_path = Path(dataset["class_table"])
    if base_dir is not None and not table_path.is_absolute():
        table_path = base_dir / table_path
    class_table = load_class_table(table_path)

    try:
        cfg = ExperimentConfig.model_validate(_inject_num_classes(raw, class_table.num_classes))
    except ValidationError as e:
        raise ConfigError(format_validation_error(e))

    if base_dir is not None:
        section = cfg.dataset
        cfg.dataset = section.model_copy(update={"root": _under(base_dir, section.root), "class_table": table_path})
        cfg.output = cfg.output.model_copy(update={"root": _under(base_dir, cfg.output.root)})
        cfg.train = cfg.train.model_copy(update={"checkpoint_dir": cfg.run_dir})

    if cfg.num_classes != class_table.num_classes:
        raise ConfigError(
            f"model.num_classes: {cfg.num_classes} does not match the class table ({class_table.num_classes})"
        )
    return cfg, class_table


def load_experiment(path: Union[str, Path]) -> Tuple[ExperimentConfig, ClassTable]:
    """Read and validate an experiment JSON file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"<root>: config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigError(f"<root>: {path} is not valid JSON ({e})")
    return parse_experiment(raw, base_dir=path.parent)


def dump_resolved(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the config with every default explicit; it parses back to the same config"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = cfg.model_dump(mode="json")
    # paths were resolved against the config file on load, keep them absolute
    data["dataset"]["root"] = str(Path(cfg.dataset.root).resolve())
    data["dataset"]["class_table"] = str(Path(cfg.dataset.class_table).resolve())
    data["output"]["root"] = str(Path(cfg.output.root).resolve())
    data["train"]["checkpoint_dir"] = str(Path(cfg.run_dir).resolve())
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path
