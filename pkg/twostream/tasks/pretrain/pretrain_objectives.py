#!/usr/bin/env python3

"""
Losses of the two pretraining tasks: masked multi-modal modelling and multi-modal alignment prediction.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, List, Optional, Sequence

import numpy as np

from twostream.data.data_rng import derive_rng
from twostream.data.data_types import PairedExample
from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_inputs import DIST_TOLERANCE, ImageInput, StreamOutputs, TextInput
from twostream.tasks.pretrain.pretrain_masking import MASK_RATE, MaskingPlan, apply_region_masking, apply_text_masking
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor


logger = getLogger("twostream")

COMPONENTS = ("masked_text", "masked_region", "alignment")


@dataclass
class PretrainItem:
    text: TextInput
    image: ImageInput
    plan: MaskingPlan
    aligned: bool


PretrainBatch = List[PretrainItem]


@dataclass
class PretrainLoss:
    """
    total is the differentiable sum of the components; components hold the same values as floats.
    """

    total: Tensor
    components: Dict[str, float]
    correct: int
    count: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


def _zero(like: Tensor) -> Tensor:
    return ops.constant(np.zeros(1), like=like)


def _linear(x: Tensor, model: TwoStreamModel, prefix: str) -> Tensor:
    return ops.add(ops.matmul(x, model[f"{prefix}.weight"]), model[f"{prefix}.bias"])


def masked_text_loss(h_w: Tensor, plan: MaskingPlan, model: TwoStreamModel) -> Tensor:
    """
    Mean cross-entropy of the original word at every masked position; 0 when nothing was masked.
    """
    if not plan.has_text:
        return _zero(h_w)
    logits = _linear(ops.embedding_lookup(h_w, plan.text_indices), model, "pretrain.mlm")
    return ops.nll(ops.log_softmax(logits, axis=-1), plan.text_targets)


def masked_region_loss(h_v: Tensor, plan: MaskingPlan, model: TwoStreamModel) -> Tensor:
    """
    Mean over masked regions of KL(detector distribution ‖ predicted class distribution); 0 when nothing was masked.
    """
    if not plan.has_regions:
        return _zero(h_v)
    targets = np.asarray(plan.region_targets, dtype=np.float64)
    sums = targets.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > DIST_TOLERANCE:
        raise ContractError(f"region targets must be distributions, got row sums {sums.tolist()}")
    rows = ops.embedding_lookup(h_v, plan.region_indices + 1)
    log_probs = ops.log_softmax(_linear(rows, model, "pretrain.region"), axis=-1)
    count = targets.shape[0]
    cross_entropy = ops.scale(ops.total(ops.mul(log_probs, ops.constant(targets, like=log_probs))), -1.0 / count)
    positive = targets > 0
    entropy = float(np.sum(targets[positive] * np.log(targets[positive]))) / count
    return ops.add(cross_entropy, ops.constant(np.array([entropy]), like=log_probs))


def pooled_product(h_img: Tensor, h_cls: Tensor, model: TwoStreamModel) -> Tensor:
    """
    tanh-pool h_IMG and h_CLS into the shared pooled width and multiply them elementwise.
    """
    pooled_v = ops.tanh(_linear(h_img, model, "pool.image"))
    pooled_w = ops.tanh(_linear(h_cls, model, "pool.text"))
    return ops.mul(pooled_v, pooled_w)


def alignment_score(h_img: Tensor, h_cls: Tensor, model: TwoStreamModel) -> Tensor:
    """
    Logit that the caption describes the image; sigmoid gives the probability.
    """
    return _linear(pooled_product(h_img, h_cls, model), model, "pretrain.align")


def outputs_alignment(outputs: StreamOutputs, model: TwoStreamModel) -> Tensor:
    return alignment_score(outputs.h_img, outputs.h_cls, model)


def make_negative(example: PairedExample, pool: Sequence[PairedExample], rng: np.random.Generator) -> PairedExample:
    """
    Swap either the image (p=0.5) or the caption for that of another pool member.

    Only donors whose swapped side differs from the example's qualify. When no donor differs on the drawn side the
    other side is swapped instead.
    """
    others = [other for other in pool if other.example_id != example.example_id]
    if not others:
        raise ContractError(f"negatives need a pool of at least 2 distinct examples, got {len(pool)}")
    swap_image = bool(rng.random() < 0.5)
    donors = _donors(example, others, swap_image)
    if not donors:
        swap_image = not swap_image
        donors = _donors(example, others, swap_image)
    if not donors:
        raise ContractError(f"no pool member differs from example {example.example_id} in its image or caption")
    donor = donors[int(rng.integers(0, len(donors)))]
    return example.swap_image(donor.image) if swap_image else example.swap_text(donor.text)


def _donors(example: PairedExample, others: Sequence[PairedExample], swap_image: bool) -> List[PairedExample]:
    if swap_image:
        return [other for other in others if other.image != example.image]
    return [other for other in others if other.text != example.text]


def mask_example(
    example: PairedExample,
    rng: np.random.Generator,
    word_ids: np.ndarray,
    text_rate: float = MASK_RATE,
    region_rate: float = MASK_RATE,
) -> PretrainItem:
    """Mask words and regions of the same example together."""
    text, text_plan = apply_text_masking(example.text, text_rate, rng, word_ids)
    image, region_plan = apply_region_masking(example.image, region_rate, rng)
    return PretrainItem(text=text, image=image, plan=text_plan.combine(region_plan), aligned=example.aligned)


def build_batch(
    examples: Sequence[PairedExample],
    pool: Sequence[PairedExample],
    word_ids: np.ndarray,
    seed: int,
    epoch: int,
    text_rate: float = MASK_RATE,
    region_rate: float = MASK_RATE,
    mask_negatives: bool = False,
) -> PretrainBatch:
    """
    One masked aligned item and one negative per example, interleaved. Every draw is keyed on
    (seed, epoch, example_id), so the batch does not depend on how examples were grouped or ordered.
    :param examples: Aligned examples of this batch
    :param pool: Negatives draw their replacement image or caption from here
    :param word_ids: Random-word pool for text masking
    :param seed: Global seed
    :param epoch:
    :param text_rate:
    :param region_rate:
    :param mask_negatives: Also mask negatives and score their reconstruction
    :return:
    """
    batch: PretrainBatch = []
    for example in examples:
        batch.append(
            mask_example(example, derive_rng(seed, "mask", epoch, example.example_id), word_ids, text_rate, region_rate)
        )
        negative = make_negative(example, pool, derive_rng(seed, "negative", epoch, example.example_id))
        if mask_negatives:
            rng = derive_rng(seed, "mask", epoch, example.example_id, 1)
            batch.append(mask_example(negative, rng, word_ids, text_rate, region_rate))
        else:
            batch.append(PretrainItem(text=negative.text, image=negative.image, plan=MaskingPlan(), aligned=False))
    return batch


def pretrain_loss(
    batch: PretrainBatch, model: TwoStreamModel, mode: str = "eval", rng: Optional[np.random.Generator] = None
) -> PretrainLoss:
    """
    Unit-weighted sum of the masked word loss, the masked region loss and the alignment BCE.

    The masked losses are averaged over the items that carry a plan of their kind, the alignment BCE over every
    item, so the three components add up to the total.
    :param batch: Prepared items
    :param model:
    :param mode: 'train' or 'eval'
    :param rng: Dropout source in train mode
    :return:
    """
    if not batch:
        raise ContractError("pretrain_loss needs at least one item")
    text_terms: List[Tensor] = []
    region_terms: List[Tensor] = []
    logits: List[Tensor] = []
    for item in batch:
        outputs = model.forward(item.text, item.image, mode=mode, rng=rng)
        if item.plan.has_text:
            text_terms.append(masked_text_loss(outputs.h_w, item.plan, model))
        if item.plan.has_regions:
            region_terms.append(masked_region_loss(outputs.h_v, item.plan, model))
        logits.append(outputs_alignment(outputs, model))

    stacked = ops.stack_rows(logits)
    labels = np.array([[1.0 if item.aligned else 0.0] for item in batch])
    alignment = ops.bce_with_logits(stacked, labels)
    masked_text = _average(text_terms, like=alignment)
    masked_region = _average(region_terms, like=alignment)
    total = ops.add(ops.add(masked_text, masked_region), alignment)

    predictions = stacked.data.reshape(-1) > 0.0
    correct = int(np.sum(predictions == labels.reshape(-1).astype(bool)))
    components = {
        "masked_text": masked_text.item(),
        "masked_region": masked_region.item(),
        "alignment": alignment.item(),
    }
    return PretrainLoss(total=total, components=components, correct=correct, count=len(batch))


def _average(terms: List[Tensor], like: Tensor) -> Tensor:
    if not terms:
        return _zero(like)
    summed = terms[0]
    for term in terms[1:]:
        summed = ops.add(summed, term)
    return ops.scale(summed, 1.0 / len(terms))
