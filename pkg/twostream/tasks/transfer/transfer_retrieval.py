#!/usr/bin/env python3

"""
Caption-based image retrieval: four-way fine-tuning instances with hard negatives, pool scoring and recall@k.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from twostream.data.data_types import PairedExample
from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_inputs import ImageInput, TextInput
from twostream.tasks.pretrain.pretrain_objectives import alignment_score
from twostream.tasks.transfer.transfer_types import RetrievalPool
from twostream.tensor.tensor_base import no_grad


logger = getLogger("twostream")

HARD_NEGATIVE_NEIGHBORS = 100
RECALL_AT = (1, 5, 10)
DISTRACTOR_KINDS = ("random_caption", "random_image", "hard_negative")


class NeighborIndex:
    """
    Euclidean nearest neighbors between images, each image summarized by its mean raw region feature.
    """

    def __init__(self, images: Sequence[ImageInput], neighbors: int = HARD_NEGATIVE_NEIGHBORS) -> None:
        if len(images) < 2:
            raise ContractError(f"hard negatives need a pool of at least 2 images, got {len(images)}")
        self.means = np.stack([image.mean_feature() for image in images])
        self.k = min(neighbors, len(images) - 1)

    def nearest(self, index: int) -> np.ndarray:
        """The k images closest to image `index`, itself excluded, nearest first (ties by position)."""
        distances = np.linalg.norm(self.means - self.means[index], axis=1)
        distances[index] = np.inf
        return np.argsort(distances, kind="stable")[: self.k]


@dataclass
class RetrievalInstance:
    """The true pair followed by one distractor of each kind; the correct choice is always 0."""

    pairs: List[Tuple[TextInput, ImageInput]]
    kinds: List[str]
    sources: List[int]
    label: int = 0


def _pick(rng: np.random.Generator, candidates: Sequence[int], kind: str, example_id: int) -> int:
    if not candidates:
        raise ContractError(f"no {kind} distractor in the pool differs from example {example_id}")
    return int(candidates[int(rng.integers(0, len(candidates)))])


def retrieval_finetune_batch(
    example: PairedExample,
    pool: Sequence[PairedExample],
    rng: np.random.Generator,
    index: Optional[NeighborIndex] = None,
) -> RetrievalInstance:
    """
    Build a four-way instance for one aligned pair.
    :param example: The true pair; it must be a member of pool
    :param pool: Source of the distractors
    :param rng: Source of the random picks
    :param index: Neighbor index over pool images, built on the fly when omitted
    :return:
    """
    positions = [i for i, other in enumerate(pool) if other.example_id == example.example_id]
    if not positions:
        raise ContractError(f"example {example.example_id} is not in the retrieval pool")
    target = positions[0]
    index = index or NeighborIndex([e.image for e in pool])
    if len(pool) < index.k + 1:
        raise ContractError(f"pool of {len(pool)} is smaller than the hard-negative neighborhood {index.k} + 1")

    captions = [i for i, other in enumerate(pool) if i != target and other.text != example.text]
    images = [i for i, other in enumerate(pool) if i != target and other.image != example.image]
    neighbors = [int(i) for i in index.nearest(target) if pool[i].image != example.image]
    caption_source = _pick(rng, captions, "random_caption", example.example_id)
    image_source = _pick(rng, images, "random_image", example.example_id)
    hard_source = _pick(rng, neighbors, "hard_negative", example.example_id)
    return RetrievalInstance(
        pairs=[
            (example.text, example.image),
            (pool[caption_source].text, example.image),
            (example.text, pool[image_source].image),
            (example.text, pool[hard_source].image),
        ],
        kinds=["true"] + list(DISTRACTOR_KINDS),
        sources=[target, caption_source, image_source, hard_source],
    )


def score_pool(pool: RetrievalPool, model: TwoStreamModel, cache_text: bool = True) -> np.ndarray:
    """
    Alignment logit of every (caption, image) pair, captions as rows.
    :param pool:
    :param model:
    :param cache_text: Run the text-only layers once per caption instead of once per pair (two-stream only)
    :return:
    """
    cache = cache_text and model.config.architecture == "two_stream"
    scores = np.zeros((len(pool.captions), len(pool.images)))
    with no_grad():
        for c, caption in enumerate(pool.captions):
            prefix = model.encode_text_prefix(caption) if cache else None
            for i, image in enumerate(pool.images):
                outputs = model.forward(caption, image, text_prefix=prefix)
                scores[c, i] = alignment_score(outputs.h_img, outputs.h_cls, model).item()
        logger.debug("Scored a %s x %s retrieval pool", len(pool.captions), len(pool.images))
    return scores


def ranks(scores: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """
    1-based rank of each row's gold column: one plus the number of strictly higher scores in the row.
    """
    rows = np.arange(scores.shape[0])
    return 1 + np.sum(scores > scores[rows, gold][:, None], axis=1)


def recall_at_k(scores: np.ndarray, gold: np.ndarray, ks: Sequence[int] = RECALL_AT) -> Dict[int, float]:
    if scores.shape[0] == 0:
        raise ContractError("recall needs at least one query")
    found = ranks(scores, np.asarray(gold, dtype=np.int64))
    return {int(k): float(np.mean(found <= k)) for k in ks}


def retrieval_metrics(scores: np.ndarray, pool: RetrievalPool, ks: Sequence[int] = RECALL_AT) -> Dict[str, float]:
    """
    recall@k for captions retrieving images, and image_recall@k for images retrieving captions.
    """
    inverse = np.empty_like(pool.gold)
    inverse[pool.gold] = np.arange(len(pool.gold))
    metrics = {f"recall@{k}": v for k, v in recall_at_k(scores, pool.gold, ks).items()}
    metrics.update({f"image_recall@{k}": v for k, v in recall_at_k(scores.T, inverse, ks).items()})
    return metrics


def zero_shot_retrieval(
    pool: RetrievalPool, model: TwoStreamModel, ks: Sequence[int] = RECALL_AT, cache_text: bool = True
) -> Dict[str, float]:
    """
    Rank the pool with the pretraining alignment head, no fine-tuning involved.
    """
    metrics = retrieval_metrics(score_pool(pool, model, cache_text=cache_text), pool, ks)
    logger.info("Zero-shot retrieval over %s images: %s", len(pool), metrics)
    return metrics
