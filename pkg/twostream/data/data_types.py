#!/usr/bin/env python3

"""
Generator configuration and the aligned image–caption pair.
"""

from dataclasses import dataclass, replace
import hashlib
import json
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from twostream.data.data_rng import derive_rng
from twostream.data.data_vocab import Vocabulary
from twostream.model.model_inputs import ImageInput, TextInput


CAPTION_TEMPLATES = ("single", "pair", "triple")


class GeneratorConfig(BaseModel):
    """
    Everything the scene/caption generator depends on. Class prototypes and the vocabulary are derived from
    these fields, so the config digest identifies a corpus.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_region_classes: int = Field(default=8, gt=1)
    visual_feature_dim: int = Field(default=32, gt=0)
    prototype_scale: float = Field(default=1.0, gt=0.0)
    feature_noise_sigma: float = Field(default=0.1, ge=0.0)
    detector_scale: float = Field(default=3.0, ge=0.0)
    detector_temperature: float = Field(default=1.0, gt=0.0)
    detector_noise_sigma: float = Field(default=0.5, ge=0.0)
    min_regions: int = Field(default=4, ge=1)
    max_regions: int = Field(default=8, ge=1)
    min_box_side: float = Field(default=0.05, gt=0.0, lt=1.0)
    max_box_side: float = Field(default=0.5, gt=0.0, le=1.0)
    caption_templates: List[str] = Field(default_factory=lambda: list(CAPTION_TEMPLATES))
    seed: int = Field(default=0, ge=0)

    @field_validator("caption_templates")
    @classmethod
    def _known_templates(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(CAPTION_TEMPLATES))
        if unknown or not value:
            raise ValueError(f"caption templates must be a non-empty subset of {CAPTION_TEMPLATES}, got {value}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "GeneratorConfig":
        if self.min_regions > self.max_regions:
            raise ValueError(f"min_regions {self.min_regions} exceeds max_regions {self.max_regions}")
        if self.min_box_side > self.max_box_side:
            raise ValueError(f"min_box_side {self.min_box_side} exceeds max_box_side {self.max_box_side}")
        return self

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode("utf-8")).hexdigest()

    def prototypes(self) -> np.ndarray:
        """class → feature vector table, C × visual_feature_dim."""
        rng = derive_rng(self.seed, "prototypes")
        return rng.normal(0.0, self.prototype_scale, size=(self.num_region_classes, self.visual_feature_dim))

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.num_region_classes)


@dataclass(frozen=True, eq=False)
class PairedExample:
    """
    One scene and one caption. `aligned` is False for negatives built by swapping either side.
    """

    example_id: int
    image: ImageInput
    text: TextInput
    aligned: bool = True

    def swap_image(self, image: ImageInput) -> "PairedExample":
        return replace(self, image=image, aligned=False)

    def swap_text(self, text: TextInput) -> "PairedExample":
        return replace(self, text=text, aligned=False)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, PairedExample)
            and self.example_id == other.example_id
            and self.aligned == other.aligned
            and self.image == other.image
            and self.text == other.text
        )
