#!/usr/bin/env python3

"""
Run configuration: packaged defaults, an optional user YAML file, then command-line flags, in that order.

Config files are flat YAML mappings. The effective configuration of every command is written back into its run
directory as config.yaml, which can be passed to --config to repeat the run.
"""

import importlib.resources
from logging import getLogger
import os
import pathlib
from typing import Any, Dict, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from yaml import YAMLError, safe_dump, safe_load

from twostream.data.data_types import GeneratorConfig
from twostream.errors import ContractError, ParseError
from twostream.model.model_config import ModelConfig
from twostream.training.training_config import TrainConfig


logger = getLogger("twostream")

PACKAGED_CONFIG = "twostream_conf.yaml"
RUN_ROOT_VARIABLE = "TWOSTREAM_RUN_ROOT"
EFFECTIVE_CONFIG = "config.yaml"
DESK_DEPTH = 2
PAPER_DEPTH = 6

# TrainConfig fields a run config may override; None keeps the preset value.
TRAIN_OVERRIDES = (
    "epochs",
    "batch_size",
    "peak_lr",
    "warmup_fraction",
    "grad_clip",
    "weight_decay",
    "text_mask_rate",
    "region_mask_rate",
    "mask_negatives",
)


class RunConfig(BaseModel):
    """
    Every setting a command reads. Unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Model
    preset: Literal["desk", "paper"] = "desk"
    arch: Literal["two_stream", "single_stream"] = "two_stream"
    depth: Optional[int] = Field(default=None, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)

    # Corpus
    n: int = Field(default=5000, ge=2)
    n_val: int = Field(default=500, ge=2)
    n_test: int = Field(default=500, ge=2)
    data_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    num_region_classes: int = Field(default=8, gt=3)
    visual_feature_dim: int = Field(default=32, gt=0)
    min_regions: int = Field(default=4, ge=1)
    max_regions: int = Field(default=8, ge=1)
    task_examples: int = Field(default=500, ge=2)
    task_eval_examples: int = Field(default=100, ge=2)
    retrieval_pool: int = Field(default=100, ge=2)

    # Training
    epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    peak_lr: Optional[float] = Field(default=None, gt=0.0)
    warmup_fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    grad_clip: Optional[float] = Field(default=None, ge=0.0)
    weight_decay: Optional[float] = Field(default=None, ge=0.0)
    text_mask_rate: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    region_mask_rate: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    mask_negatives: Optional[bool] = None

    # Caption sampling
    num_samples: int = Field(default=5, ge=1)
    steps: int = Field(default=10, ge=0)
    length: int = Field(default=6, ge=1)
    temperature: float = Field(default=1.0, gt=0.0)

    @classmethod
    def load(cls, config_file: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """
        Build the effective configuration.
        :param config_file: User YAML file layered over the packaged defaults
        :param overrides: Command-line values; None entries are ignored
        :return:
        """
        settings = packaged_defaults()
        if config_file:
            settings.update(read_config_file(pathlib.Path(config_file)))
        settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls(**settings)
        except ValidationError as e:
            raise ContractError(f"Invalid run configuration: {str(e)}") from e

    def generator_config(self) -> GeneratorConfig:
        try:
            return GeneratorConfig(
                num_region_classes=self.num_region_classes,
                visual_feature_dim=self.visual_feature_dim,
                min_regions=self.min_regions,
                max_regions=self.max_regions,
                seed=self.seed,
            )
        except ValidationError as e:
            raise ContractError(f"Invalid corpus settings: {str(e)}") from e

    def model_config_for(self, corpus: GeneratorConfig) -> ModelConfig:
        """
        Architecture for this run, sized to the corpus it trains on (vocabulary, feature width, class count).
        """
        vocab_size = len(corpus.vocabulary())
        fitted = dict(
            architecture=self.arch,
            text_vocab_size=vocab_size,
            visual_feature_dim=corpus.visual_feature_dim,
            num_region_classes=corpus.num_region_classes,
            dropout=self.dropout,
        )
        try:
            if self.preset == "paper":
                return ModelConfig.paper(num_co_blocks=self.depth or PAPER_DEPTH, **fitted)
            return ModelConfig.desk(num_co_blocks=self.depth or DESK_DEPTH, **fitted)
        except ValidationError as e:
            raise ContractError(f"Invalid model settings: {str(e)}") from e

    def train_config(self, task: Optional[str] = None) -> TrainConfig:
        """
        Pretraining settings, or the fine-tuning preset of `task`, with this config's overrides applied.
        """
        overrides = {k: getattr(self, k) for k in TRAIN_OVERRIDES if getattr(self, k) is not None}
        try:
            if task is None:
                return TrainConfig.pretrain_preset(self.preset, seed=self.seed, **overrides)
            return TrainConfig.finetune_preset(task, self.preset, seed=self.seed, **overrides)
        except ValidationError as e:
            raise ContractError(f"Invalid training settings: {str(e)}") from e


def _flat_mapping(data: Any, source: str) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError(f"The config file {source} must hold a key: value mapping")
    nested = sorted(k for k, v in data.items() if isinstance(v, (dict, list)))
    if nested:
        raise ParseError(f"The config file {source} must be flat, nested values under: {', '.join(nested)}")
    return dict(data)


def read_config_file(path: pathlib.Path) -> Dict[str, Any]:
    if not path.is_file():
        raise ContractError(f"The provided configuration file {str(path)} is not found.")
    with path.open() as cf:
        try:
            data = safe_load(cf)
        except YAMLError as e:
            raise ParseError(f"Unable to parse the provided config file {str(path)} to YAML: {str(e)}") from e
    return _flat_mapping(data, str(path))


def packaged_defaults() -> Dict[str, Any]:
    resource = importlib.resources.files("twostream") / PACKAGED_CONFIG
    return _flat_mapping(safe_load(resource.read_text()), PACKAGED_CONFIG)


def resolve_run_dir(out: str) -> pathlib.Path:
    """
    Relative run directories are placed under $TWOSTREAM_RUN_ROOT when it is set.
    """
    path = pathlib.Path(out)
    root = os.environ.get(RUN_ROOT_VARIABLE)
    if root and not path.is_absolute():
        path = pathlib.Path(root) / path
    return path


def write_effective_config(run_dir: pathlib.Path, config: RunConfig, **command: Any) -> pathlib.Path:
    """
    Write config.yaml: every run setting, headed by comment lines naming the command and its inputs so the
    file itself stays loadable with --config.
    """
    settings = {k: v for k, v in config.model_dump().items() if v is not None}
    path = pathlib.Path(run_dir) / EFFECTIVE_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as out:
        for key, value in command.items():
            if value is not None:
                out.write(f"# {key}: {value}\n")
        safe_dump(settings, out, default_flow_style=False, sort_keys=True)
    logger.debug("Wrote effective configuration to %s", str(path))
    return path
