#!/usr/bin/env python3

"""
Transfer task examples, their file records, and box overlap.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from twostream.data.data_io import ImageRecord, TextRecord
from twostream.data.data_vocab import CLS, SEP
from twostream.errors import ContractError
from twostream.model.model_inputs import ImageInput, TextInput


NUM_CHOICES = 4
IOU_THRESHOLD = 0.5


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Intersection over union of two (x1, y1, x2, y2) boxes.
    """
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ContractError(f"box {tuple(box)} is degenerate")
    width = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    height = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = width * height
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def pair_text(context: Sequence[int], option: Sequence[int]) -> TextInput:
    """CLS context SEP option SEP, with the option in segment 1."""
    tokens = [CLS] + list(context) + [SEP] + list(option) + [SEP]
    segments = [0] * (len(context) + 2) + [1] * (len(option) + 1)
    return TextInput.build(tokens, segments)


def single_text(words: Sequence[int]) -> TextInput:
    return TextInput.build([CLS] + list(words) + [SEP])


@dataclass
class QAExample:
    """A question about a scene, with a soft score per answer (one answer per region class)."""

    example_id: int
    image: ImageInput
    question: TextInput
    targets: np.ndarray

    def __post_init__(self) -> None:
        if self.targets.ndim != 1 or not np.any(self.targets > 0):
            raise ContractError(f"QA example {self.example_id} needs at least one positive target")
        if np.any(self.targets < 0) or np.any(self.targets > 1):
            raise ContractError(f"QA example {self.example_id} has target scores outside [0, 1]")

    @property
    def best_answer(self) -> int:
        return int(np.argmax(self.targets))


@dataclass
class MultipleChoiceExample:
    """
    Two four-way stages over one scene: pick the answer to the question, then the rationale for that answer
    given the question and the correct answer.
    """

    example_id: int
    image: ImageInput
    question: List[int]
    answers: List[List[int]]
    answer: int
    rationales: List[List[int]]
    rationale: int

    def __post_init__(self) -> None:
        if len(self.answers) != NUM_CHOICES or len(self.rationales) != NUM_CHOICES:
            raise ContractError(f"multiple choice example {self.example_id} needs exactly {NUM_CHOICES} options")
        if not (0 <= self.answer < NUM_CHOICES and 0 <= self.rationale < NUM_CHOICES):
            raise ContractError(f"multiple choice example {self.example_id} has an out-of-range correct index")

    def answer_inputs(self) -> List[TextInput]:
        return [pair_text(self.question, option) for option in self.answers]

    def rationale_inputs(self) -> List[TextInput]:
        context = self.question + self.answers[self.answer]
        return [pair_text(context, option) for option in self.rationales]


@dataclass
class RefExpExample:
    """A referring expression over proposal regions, with the box it refers to."""

    example_id: int
    image: ImageInput
    expression: TextInput
    gt_box: np.ndarray

    def __post_init__(self) -> None:
        if self.image.num_regions < 1:
            raise ContractError(f"referring expression {self.example_id} needs at least one proposal")

    def labels(self, threshold: float = IOU_THRESHOLD) -> np.ndarray:
        return np.array([1.0 if iou(box, self.gt_box) >= threshold else 0.0 for box in self.image.boxes])


@dataclass
class RetrievalPool:
    """Caption c describes image gold[c]; the pairing is a bijection."""

    images: List[ImageInput]
    captions: List[TextInput]
    gold: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.captions) or sorted(self.gold.tolist()) != list(range(len(self.images))):
            raise ContractError("a retrieval pool needs as many captions as images and a one-to-one gold pairing")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_examples(cls, examples: Sequence) -> "RetrievalPool":
        return cls(
            images=[e.image for e in examples],
            captions=[e.text for e in examples],
            gold=np.arange(len(examples), dtype=np.int64),
        )

    def permuted(self, order: Sequence[int]) -> "RetrievalPool":
        """Same pool with the images reordered; gold follows the images."""
        order = np.asarray(order, dtype=np.int64)
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        return RetrievalPool(images=[self.images[i] for i in order], captions=self.captions, gold=position[self.gold])


# File records


class QARecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    example_id: int = Field(ge=0)
    image: ImageRecord
    question: TextRecord
    targets: List[float]

    @classmethod
    def from_example(cls, example: QAExample) -> "QARecord":
        return cls(
            example_id=example.example_id,
            image=ImageRecord.from_image(example.image),
            question=TextRecord.from_text(example.question),
            targets=example.targets.tolist(),
        )

    def to_example(self) -> QAExample:
        return QAExample(
            example_id=self.example_id,
            image=self.image.to_image(),
            question=self.question.to_text(),
            targets=np.asarray(self.targets, dtype=np.float64),
        )


class MultipleChoiceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    example_id: int = Field(ge=0)
    image: ImageRecord
    question: List[int]
    answers: List[List[int]]
    answer: int
    rationales: List[List[int]]
    rationale: int

    @field_validator("answers", "rationales")
    @classmethod
    def _four_options(cls, value: List[List[int]]) -> List[List[int]]:
        if len(value) != NUM_CHOICES:
            raise ValueError(f"expected {NUM_CHOICES} options, got {len(value)}")
        return value

    @classmethod
    def from_example(cls, example: MultipleChoiceExample) -> "MultipleChoiceRecord":
        return cls(
            example_id=example.example_id,
            image=ImageRecord.from_image(example.image),
            question=example.question,
            answers=example.answers,
            answer=example.answer,
            rationales=example.rationales,
            rationale=example.rationale,
        )

    def to_example(self) -> MultipleChoiceExample:
        return MultipleChoiceExample(
            example_id=self.example_id,
            image=self.image.to_image(),
            question=self.question,
            answers=self.answers,
            answer=self.answer,
            rationales=self.rationales,
            rationale=self.rationale,
        )


class RefExpRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    example_id: int = Field(ge=0)
    image: ImageRecord
    expression: TextRecord
    gt_box: List[float]

    @classmethod
    def from_example(cls, example: RefExpExample) -> "RefExpRecord":
        return cls(
            example_id=example.example_id,
            image=ImageRecord.from_image(example.image),
            expression=TextRecord.from_text(example.expression),
            gt_box=example.gt_box.tolist(),
        )

    def to_example(self) -> RefExpExample:
        return RefExpExample(
            example_id=self.example_id,
            image=self.image.to_image(),
            expression=self.expression.to_text(),
            gt_box=np.asarray(self.gt_box, dtype=np.float64),
        )
