#!/usr/bin/env python3

"""
Procedural scenes and captions, standing in for a detector run over web images with alt-text captions.

A scene is a handful of boxes, each carrying a class. Its "detector" output is the class prototype plus Gaussian
noise as the region feature, and a softened, noisy one-hot class distribution. Captions name one to three of the
scene's regions, with a spatial relation word read off the box centers.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import List, Optional, Sequence, Tuple

import numpy as np

from twostream.data.data_rng import derive_rng
from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.data.data_vocab import CLS, SEP, Vocabulary
from twostream.errors import ContractError
from twostream.model.model_inputs import ImageInput, TextInput


logger = getLogger("twostream")

SPLITS = ("train", "val", "test")
TEMPLATE_REGIONS = {"single": 1, "pair": 2, "triple": 3}


@dataclass
class CaptionPlan:
    """Which regions a caption describes and the words it uses (without CLS/SEP)."""

    template: str
    regions: List[int]
    words: List[str]


def box_center(box: Sequence[float]) -> Tuple[float, float]:
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def spatial_relation(subject: Sequence[float], anchor: Sequence[float]) -> str:
    """
    Where `subject` sits relative to `anchor`, along the axis their centers differ most on. Image y grows downward.
    """
    (sx, sy), (ax, ay) = box_center(subject), box_center(anchor)
    dx, dy = sx - ax, sy - ay
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "above" if dy < 0 else "below"


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def generate_scene(
    cfg: GeneratorConfig, rng: np.random.Generator, prototypes: Optional[np.ndarray] = None
) -> ImageInput:
    """
    Draw one scene.
    :param cfg: Generator settings
    :param rng: Source of this scene's randomness
    :param prototypes: cfg.prototypes(), passed in to avoid recomputing it per scene
    :return:
    """
    if prototypes is None:
        prototypes = cfg.prototypes()
    count = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    low = rng.uniform(0.0, 1.0 - cfg.min_box_side, size=(count, 2))
    sides = rng.uniform(cfg.min_box_side, cfg.max_box_side, size=(count, 2))
    high = np.minimum(low + sides, 1.0)
    boxes = np.stack([low[:, 0], low[:, 1], high[:, 0], high[:, 1]], axis=1)

    classes = rng.integers(0, cfg.num_region_classes, size=count)
    features = prototypes[classes] + rng.normal(0.0, cfg.feature_noise_sigma, size=(count, cfg.visual_feature_dim))
    one_hot = np.eye(cfg.num_region_classes)[classes]
    noise = rng.normal(0.0, cfg.detector_noise_sigma, size=(count, cfg.num_region_classes))
    detector_dist = _softmax_rows((one_hot * cfg.detector_scale + noise) / cfg.detector_temperature)
    return ImageInput(region_features=features, boxes=boxes, detector_dist=detector_dist, class_ids=classes)


def plan_caption(scene: ImageInput, cfg: GeneratorConfig, rng: np.random.Generator, vocab: Vocabulary) -> CaptionPlan:
    """
    Pick a template the scene has enough regions for, the regions it describes, and its words.
    """
    if scene.num_regions < 1 or scene.class_ids is None:
        raise ContractError("a caption needs a scene with at least one labelled region")
    feasible = [t for t in cfg.caption_templates if TEMPLATE_REGIONS[t] <= scene.num_regions] or ["single"]
    template = feasible[int(rng.integers(0, len(feasible)))]
    regions = [int(r) for r in rng.choice(scene.num_regions, size=TEMPLATE_REGIONS[template], replace=False)]
    names = [vocab.class_word(scene.class_ids[r]) for r in regions]
    if template == "single":
        words = ["a", names[0]]
    elif template == "pair":
        relation = spatial_relation(scene.boxes[regions[0]], scene.boxes[regions[1]])
        words = ["a", names[0], relation, "of", "a", names[1]]
    else:
        words = ["a", names[0], "and", "a", names[1], "and", "a", names[2]]
    return CaptionPlan(template=template, regions=regions, words=words)


def wrap(ids: Sequence[int]) -> TextInput:
    return TextInput.build([CLS] + list(ids) + [SEP])


def generate_caption(
    scene: ImageInput, cfg: GeneratorConfig, rng: np.random.Generator, vocab: Optional[Vocabulary] = None
) -> TextInput:
    vocab = vocab or cfg.vocabulary()
    return wrap(vocab.encode(plan_caption(scene, cfg, rng, vocab).words))


class SceneFactory:
    """
    Generates examples by (split, id), caching the derived prototype table and vocabulary.
    """

    def __init__(self, cfg: GeneratorConfig) -> None:
        self.cfg = cfg
        self.prototypes = cfg.prototypes()
        self.vocab = cfg.vocabulary()

    def example(self, split: str, example_id: int) -> PairedExample:
        if split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got '{split}'")
        rng = derive_rng(self.cfg.seed, split, example_id)
        scene = generate_scene(self.cfg, rng, self.prototypes)
        caption = generate_caption(scene, self.cfg, rng, self.vocab)
        return PairedExample(example_id=example_id, image=scene, text=caption)


def generate_dataset(cfg: GeneratorConfig, n: int, split: str = "train") -> List[PairedExample]:
    """
    n aligned pairs with ids 0..n-1; each is a pure function of (cfg, split, id).
    """
    if n < 1:
        raise ContractError(f"a dataset needs at least one example, got n={n}")
    factory = SceneFactory(cfg)
    examples = [factory.example(split, i) for i in range(n)]
    logger.info("Generated %s %s examples", n, split)
    return examples


def select_subset(examples: Sequence[PairedExample], fraction: float, seed: int) -> List[PairedExample]:
    """
    A seeded random subset holding `fraction` of the examples, kept in id order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"subset fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(examples)
    count = max(1, int(round(fraction * len(examples))))
    chosen = derive_rng(seed, "subset").permutation(len(examples))[:count]
    return [examples[i] for i in sorted(int(c) for c in chosen)]
