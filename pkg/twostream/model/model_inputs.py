#!/usr/bin/env python3

"""
Model input and output records: a caption's token layout, an image's detected regions, the two streams' outputs.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from twostream.data.data_vocab import CLS, SEP
from twostream.errors import ContractError
from twostream.tensor.tensor_base import Tensor


FULL_IMAGE_BOX = (0.0, 0.0, 1.0, 1.0)
DIST_TOLERANCE = 1e-6


def compute_spatial5(box: Sequence[float]) -> np.ndarray:
    """
    5-d location of a region: normalized corners plus the fraction of the image it covers.
    :param box: (x1, y1, x2, y2) in [0, 1]
    :return: (x1, y1, x2, y2, (x2 - x1)(y2 - y1))
    """
    x1, y1, x2, y2 = (float(c) for c in box)
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ContractError(f"box {tuple(box)} is degenerate or outside the unit square")
    return np.array([x1, y1, x2, y2, (x2 - x1) * (y2 - y1)])


def check_boxes(boxes: np.ndarray) -> None:
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ContractError(f"boxes must be a 𝒯×4 array, got shape {boxes.shape}")
    x1, y1, x2, y2 = boxes.T
    valid = (0.0 <= x1) & (x1 < x2) & (x2 <= 1.0) & (0.0 <= y1) & (y1 < y2) & (y2 <= 1.0)
    if not valid.all():
        bad = int(np.flatnonzero(~valid)[0])
        raise ContractError(f"box {bad} {tuple(boxes[bad])} is degenerate or outside the unit square")


@dataclass(frozen=True, eq=False)
class TextInput:
    """
    One token sequence in CLS, w_1 ... w_T, SEP layout (SEP may also separate segments inside it).
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray

    @classmethod
    def build(cls, token_ids: Sequence[int], segment_ids: Optional[Sequence[int]] = None) -> "TextInput":
        ids = np.asarray(token_ids, dtype=np.int64)
        segments = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
        text = cls(token_ids=ids, segment_ids=segments)
        text.validate()
        return text

    def validate(self, max_len: Optional[int] = None) -> None:
        if self.token_ids.ndim != 1 or self.token_ids.shape != self.segment_ids.shape:
            raise ContractError(
                f"token ids {self.token_ids.shape} and segment ids {self.segment_ids.shape} must be equal-length lists"
            )
        if len(self.token_ids) < 2 or self.token_ids[0] != CLS or self.token_ids[-1] != SEP:
            raise ContractError(f"text must start with CLS and end with SEP, got {self.token_ids.tolist()}")
        if max_len is not None and len(self.token_ids) > max_len:
            raise ContractError(f"text of length {len(self.token_ids)} exceeds max_text_len {max_len}")

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self.token_ids), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.token_ids)

    def with_tokens(self, token_ids: Union[Sequence[int], np.ndarray]) -> "TextInput":
        return replace(self, token_ids=np.asarray(token_ids, dtype=np.int64))

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TextInput)
            and np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.segment_ids, other.segment_ids)
        )


@dataclass(frozen=True, eq=False)
class ImageInput:
    """
    The detected regions of one image: a feature row, a normalized box and a detector class distribution each.
    `class_ids` carries the generating class of each region when known (synthetic scenes).
    """

    region_features: np.ndarray
    boxes: np.ndarray
    detector_dist: np.ndarray
    class_ids: Optional[np.ndarray] = None

    def validate(self) -> None:
        count = self.region_features.shape[0]
        if self.boxes.shape[0] != count or self.detector_dist.shape[0] != count:
            raise ContractError(
                f"{count} region features, {self.boxes.shape[0]} boxes and "
                f"{self.detector_dist.shape[0]} detector rows must agree"
            )
        check_boxes(self.boxes)
        sums = self.detector_dist.sum(axis=1)
        if count and np.max(np.abs(sums - 1.0)) > DIST_TOLERANCE:
            raise ContractError("every detector distribution row must sum to 1")

    @property
    def num_regions(self) -> int:
        return int(self.region_features.shape[0])

    @property
    def spatial5(self) -> np.ndarray:
        x1, y1, x2, y2 = self.boxes.T
        return np.stack([x1, y1, x2, y2, (x2 - x1) * (y2 - y1)], axis=1)

    def with_features(self, region_features: np.ndarray) -> "ImageInput":
        return replace(self, region_features=region_features)

    def mean_feature(self) -> np.ndarray:
        return self.region_features.mean(axis=0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageInput):
            return False
        same_classes = (self.class_ids is None and other.class_ids is None) or (
            self.class_ids is not None
            and other.class_ids is not None
            and np.array_equal(self.class_ids, other.class_ids)
        )
        return (
            same_classes
            and np.array_equal(self.region_features, other.region_features)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.detector_dist, other.detector_dist)
        )


@dataclass
class StreamOutputs:
    """
    Final states: h_v has the IMG slot in row 0 followed by one row per region; h_w has CLS in row 0.
    """

    h_v: Tensor
    h_w: Tensor
    h_img: Tensor
    h_cls: Tensor
