#!/usr/bin/env python3

"""
Optimizer, schedule and loop settings.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from twostream.errors import ContractError


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    peak_lr: float = Field(default=1e-4, gt=0.0)
    warmup_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    # 0 turns clipping off
    grad_clip: float = Field(default=1.0, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    text_mask_rate: float = Field(default=0.15, ge=0.0, lt=1.0)
    region_mask_rate: float = Field(default=0.15, ge=0.0, lt=1.0)
    mask_negatives: bool = False
    seed: int = Field(default=0, ge=0)

    @classmethod
    def pretrain_preset(cls, scale: Literal["desk", "paper"] = "desk", **overrides) -> "TrainConfig":
        settings = dict(epochs=10, batch_size=512 if scale == "paper" else 32, peak_lr=1e-4)
        settings.update(overrides)
        return cls(**settings)

    @classmethod
    def finetune_preset(cls, task: str, scale: Literal["desk", "paper"] = "desk", **overrides) -> "TrainConfig":
        """
        Per-task fine-tuning settings. The paper scale uses the full-size batch sizes and learning rates for
        20 epochs; the desk scale keeps the small model's pretraining rate at a CPU-sized batch.
        """
        if task not in ("vqa", "mc", "refexp", "retrieval"):
            raise ContractError(f"no fine-tuning preset for task '{task}'")
        if scale == "paper":
            large = task in ("vqa", "refexp")
            settings = dict(epochs=20, batch_size=256 if large else 64, peak_lr=4e-5 if large else 2e-5)
        else:
            settings = dict(epochs=10, batch_size=16, peak_lr=1e-4)
        settings.update(overrides)
        return cls(**settings)
