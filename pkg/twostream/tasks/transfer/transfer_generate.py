#!/usr/bin/env python3

"""
Synthetic transfer task data, drawn from the same scene generator as the pretraining corpus.

  vqa        "what is <relation> of the <class>": soft score 1.0 for the asked-about region's class, 0.3 for the
             class of any other region that satisfies the relation
  mc         the true caption against three captions whose first class word names a class absent from the scene;
             then "because a <class> is in the image" rationales for the correct caption
  refexp     "the <class> <relation> of the <class>" over the scene boxes plus one jittered copy of each
  retrieval  plain aligned pairs, scored as pools
"""

from logging import getLogger
from typing import Callable, Dict, List

import numpy as np

from twostream.data.data_generate import SPLITS, SceneFactory, generate_scene, plan_caption, spatial_relation
from twostream.data.data_rng import derive_rng
from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.errors import ContractError
from twostream.model.model_inputs import ImageInput
from twostream.tasks.transfer.transfer_types import (
    NUM_CHOICES,
    MultipleChoiceExample,
    QAExample,
    RefExpExample,
    single_text,
)


logger = getLogger("twostream")

TASK_CODES = {"vqa": 0, "mc": 1, "refexp": 2, "retrieval": 3}
RELATED_SCORE = 0.3
JITTER = 0.1
MAX_ATTEMPTS = 100
WHOLE_IMAGE_QUESTION = ["what", "is", "in", "the", "image"]


def _related(image: ImageInput, anchor: int, relation: str) -> List[int]:
    return [
        r
        for r in range(image.num_regions)
        if r != anchor and spatial_relation(image.boxes[r], image.boxes[anchor]) == relation
    ]


def generate_qa(factory: SceneFactory, rng: np.random.Generator, example_id: int) -> QAExample:
    cfg, vocab = factory.cfg, factory.vocab
    scene = generate_scene(cfg, rng, factory.prototypes)
    targets = np.zeros(cfg.num_region_classes)
    if scene.num_regions < 2:
        words = WHOLE_IMAGE_QUESTION
        targets[scene.class_ids] = 1.0
    else:
        subject, anchor = (int(r) for r in rng.choice(scene.num_regions, size=2, replace=False))
        relation = spatial_relation(scene.boxes[subject], scene.boxes[anchor])
        words = ["what", "is", relation, "of", "the", vocab.class_word(scene.class_ids[anchor])]
        for region in _related(scene, anchor, relation):
            targets[scene.class_ids[region]] = max(targets[scene.class_ids[region]], RELATED_SCORE)
        targets[scene.class_ids[subject]] = 1.0
    return QAExample(example_id=example_id, image=scene, question=single_text(vocab.encode(words)), targets=targets)


def _shuffled(options: List[List[int]], rng: np.random.Generator):
    """Shuffle options whose first entry is the correct one; return (options, correct index)."""
    order = rng.permutation(len(options))
    return [options[i] for i in order], int(np.flatnonzero(order == 0)[0])


def generate_mc(factory: SceneFactory, rng: np.random.Generator, example_id: int) -> MultipleChoiceExample:
    cfg, vocab = factory.cfg, factory.vocab
    if cfg.num_region_classes < NUM_CHOICES:
        raise ContractError(f"multiple choice needs at least {NUM_CHOICES} region classes")
    for _ in range(MAX_ATTEMPTS):
        scene = generate_scene(cfg, rng, factory.prototypes)
        absent = np.setdiff1d(np.arange(cfg.num_region_classes), scene.class_ids)
        if len(absent) >= NUM_CHOICES - 1:
            break
    else:
        raise ContractError(f"no scene with {NUM_CHOICES - 1} absent classes in {MAX_ATTEMPTS} attempts")

    plan = plan_caption(scene, cfg, rng, vocab)
    wrong = [int(c) for c in rng.choice(absent, size=NUM_CHOICES - 1, replace=False)]
    subject = int(scene.class_ids[plan.regions[0]])

    # Every template names its first region at word 1.
    captions = [plan.words] + [plan.words[:1] + [vocab.class_word(c)] + plan.words[2:] for c in wrong]
    answers, answer = _shuffled([vocab.encode(words) for words in captions], rng)
    reasons = [["because", "a", vocab.class_word(c), "is", "in", "the", "image"] for c in [subject] + wrong]
    rationales, rationale = _shuffled([vocab.encode(words) for words in reasons], rng)
    return MultipleChoiceExample(
        example_id=example_id,
        image=scene,
        question=vocab.encode(WHOLE_IMAGE_QUESTION),
        answers=answers,
        answer=answer,
        rationales=rationales,
        rationale=rationale,
    )


def jitter_boxes(boxes: np.ndarray, rng: np.random.Generator, min_side: float) -> np.ndarray:
    """
    Shift each box center and rescale its sides by up to about JITTER of its size, clipped to the image.
    An axis that would collapse below min_side / 2 keeps its original extent.
    """
    sides = boxes[:, 2:] - boxes[:, :2]
    centers = (boxes[:, :2] + boxes[:, 2:]) / 2.0 + rng.normal(0.0, JITTER, size=sides.shape) * sides
    sides = sides * np.exp(rng.normal(0.0, JITTER, size=sides.shape))
    low = np.clip(centers - sides / 2.0, 0.0, 1.0)
    high = np.clip(centers + sides / 2.0, 0.0, 1.0)
    collapsed = high - low < min_side / 2.0
    low = np.where(collapsed, boxes[:, :2], low)
    high = np.where(collapsed, boxes[:, 2:], high)
    return np.hstack([low, high])


def generate_refexp(factory: SceneFactory, rng: np.random.Generator, example_id: int) -> RefExpExample:
    cfg, vocab = factory.cfg, factory.vocab
    scene = generate_scene(cfg, rng, factory.prototypes)
    if scene.num_regions < 2:
        subject = 0
        words = ["the", vocab.class_word(scene.class_ids[0])]
    else:
        subject, anchor = (int(r) for r in rng.choice(scene.num_regions, size=2, replace=False))
        relation = spatial_relation(scene.boxes[subject], scene.boxes[anchor])
        words = [
            "the",
            vocab.class_word(scene.class_ids[subject]),
            relation,
            "of",
            "the",
            vocab.class_word(scene.class_ids[anchor]),
        ]
    jittered = jitter_boxes(scene.boxes, rng, cfg.min_box_side)
    noise = rng.normal(0.0, cfg.feature_noise_sigma, size=scene.region_features.shape)
    proposals = ImageInput(
        region_features=np.vstack([scene.region_features, scene.region_features + noise]),
        boxes=np.vstack([scene.boxes, jittered]),
        detector_dist=np.vstack([scene.detector_dist, scene.detector_dist]),
        class_ids=np.concatenate([scene.class_ids, scene.class_ids]),
    )
    proposals.validate()
    return RefExpExample(
        example_id=example_id,
        image=proposals,
        expression=single_text(vocab.encode(words)),
        gt_box=scene.boxes[subject].copy(),
    )


def generate_retrieval(factory: SceneFactory, rng: np.random.Generator, example_id: int) -> PairedExample:
    scene = generate_scene(factory.cfg, rng, factory.prototypes)
    caption = single_text(factory.vocab.encode(plan_caption(scene, factory.cfg, rng, factory.vocab).words))
    return PairedExample(example_id=example_id, image=scene, text=caption)


# Maps a task name to its per-example generator.
TaskGenerators: Dict[str, Callable] = {
    "vqa": generate_qa,
    "mc": generate_mc,
    "refexp": generate_refexp,
    "retrieval": generate_retrieval,
}


def generate_task_dataset(task: str, cfg: GeneratorConfig, n: int, split: str = "train") -> List:
    """
    n examples of one task, each a pure function of (cfg.seed, task, split, id).
    """
    if task not in TaskGenerators:
        raise ContractError(f"unknown transfer task '{task}', expected one of {sorted(TaskGenerators)}")
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}, got '{split}'")
    if n < 1:
        raise ContractError(f"a dataset needs at least one example, got n={n}")
    factory = SceneFactory(cfg)
    generator = TaskGenerators[task]
    examples = [
        generator(factory, derive_rng(cfg.seed, "task", TASK_CODES[task], SPLITS.index(split), i), i) for i in range(n)
    ]
    logger.info("Generated %s %s %s examples", n, split, task)
    return examples
