#!/usr/bin/env python3

"""
Input corruption for masked multi-modal modelling.

Words are selected independently at `rate` and then replaced by MASK (80%), a random word (10%) or left as they
are (10%). Regions are selected the same way, then have their features zeroed (90%) or left as they are (10%);
their detector class distributions become the reconstruction targets. Special tokens are never selected, and the
IMG slot is not part of ImageInput so it cannot be.
"""

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from twostream.data.data_vocab import MASK, SPECIAL_IDS
from twostream.errors import ContractError
from twostream.model.model_inputs import ImageInput, TextInput


MASK_RATE = 0.15

# Text actions
MASK_TOKEN, RANDOM_WORD, UNCHANGED = 0, 1, 2
TEXT_ACTION_SPLIT = (0.8, 0.1, 0.1)
# Region actions
ZEROED = 0
REGION_ZERO_PROB = 0.9


def _empty_ints() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


@dataclass
class MaskingPlan:
    """
    What was corrupted and what has to be reconstructed. Region indices address rows of the ImageInput,
    i.e. row index + 1 in the visual stream, behind the IMG slot.
    """

    text_indices: np.ndarray = field(default_factory=_empty_ints)
    text_actions: np.ndarray = field(default_factory=_empty_ints)
    text_targets: np.ndarray = field(default_factory=_empty_ints)
    region_indices: np.ndarray = field(default_factory=_empty_ints)
    region_actions: np.ndarray = field(default_factory=_empty_ints)
    region_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def has_text(self) -> bool:
        return self.text_indices.size > 0

    @property
    def has_regions(self) -> bool:
        return self.region_indices.size > 0

    def is_empty(self) -> bool:
        return not (self.has_text or self.has_regions)

    def combine(self, other: "MaskingPlan") -> "MaskingPlan":
        """Text part of self, region part of other."""
        return MaskingPlan(
            text_indices=self.text_indices,
            text_actions=self.text_actions,
            text_targets=self.text_targets,
            region_indices=other.region_indices,
            region_actions=other.region_actions,
            region_targets=other.region_targets,
        )


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"masking rate must lie in [0, 1), got {rate}")


def _apply_forced(selected: np.ndarray, actions: np.ndarray, forced: Optional[Mapping[int, int]], eligible) -> None:
    for index, action in (forced or {}).items():
        if not eligible[index]:
            raise ContractError(f"position {index} holds a special token and cannot be masked")
        selected[index] = True
        actions[index] = action


def apply_text_masking(
    text: TextInput,
    rate: float,
    rng: np.random.Generator,
    word_ids: np.ndarray,
    forced: Optional[Mapping[int, int]] = None,
):
    """
    Corrupt a caption for masked word prediction.
    :param text: Caption to corrupt
    :param rate: Selection probability of each non-special token
    :param rng: Source of the selection, the actions and the random words
    :param word_ids: Non-special vocabulary ids random replacements are drawn from (Vocabulary.word_ids())
    :param forced: position → action overrides, applied on top of the random selection
    :return: (corrupted TextInput, MaskingPlan holding the text part)
    """
    _check_rate(rate)
    if len(word_ids) == 0:
        raise ContractError("random-word replacement needs a non-empty word pool")
    tokens = text.token_ids
    count = len(tokens)
    eligible = ~np.isin(tokens, list(SPECIAL_IDS))
    draws = rng.random(count)
    action_draws = rng.random(count)
    replacements = rng.choice(word_ids, size=count)

    selected = eligible & (draws < rate)
    actions = np.where(
        action_draws < TEXT_ACTION_SPLIT[0],
        MASK_TOKEN,
        np.where(action_draws < TEXT_ACTION_SPLIT[0] + TEXT_ACTION_SPLIT[1], RANDOM_WORD, UNCHANGED),
    ).astype(np.int64)
    _apply_forced(selected, actions, forced, eligible)

    indices = np.flatnonzero(selected)
    corrupted = tokens.copy()
    chosen = actions[indices]
    corrupted[indices[chosen == MASK_TOKEN]] = MASK
    random_at = indices[chosen == RANDOM_WORD]
    corrupted[random_at] = replacements[random_at]
    plan = MaskingPlan(text_indices=indices, text_actions=chosen, text_targets=tokens[indices].copy())
    return text.with_tokens(corrupted), plan


def apply_region_masking(
    image: ImageInput, rate: float, rng: np.random.Generator, forced: Optional[Mapping[int, int]] = None
):
    """
    Corrupt an image's regions for masked class prediction. Boxes are never touched.
    :param image: Regions to corrupt
    :param rate: Selection probability of each region
    :param rng: Source of the selection and the actions
    :param forced: region index → action (ZEROED or UNCHANGED) overrides
    :return: (corrupted ImageInput, MaskingPlan holding the region part)
    """
    _check_rate(rate)
    count = image.num_regions
    draws = rng.random(count)
    action_draws = rng.random(count)
    selected = draws < rate
    actions = np.where(action_draws < REGION_ZERO_PROB, ZEROED, UNCHANGED).astype(np.int64)
    _apply_forced(selected, actions, forced, np.ones(count, dtype=bool))

    indices = np.flatnonzero(selected)
    chosen = actions[indices]
    targets = image.detector_dist[indices].copy()
    features = image.region_features.copy()
    features[indices[chosen == ZEROED]] = 0.0
    plan = MaskingPlan(region_indices=indices, region_actions=chosen, region_targets=targets)
    return image.with_features(features), plan
