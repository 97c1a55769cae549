#!/usr/bin/env python3

"""
Task heads on top of the two streams. Head tensors are named head.<task>.* and live in the model's parameter
mapping next to the base tensors.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_config import ModelConfig
from twostream.model.model_inputs import ImageInput, TextInput
from twostream.model.model_layers import Layout
from twostream.tasks.pretrain.pretrain_objectives import alignment_score, pooled_product
from twostream.tasks.transfer.transfer_types import IOU_THRESHOLD, NUM_CHOICES, RefExpExample, iou
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor


def _linear_layout(prefix: str, rows: int, cols: int) -> Layout:
    return [(f"{prefix}.weight", (rows, cols), "normal"), (f"{prefix}.bias", (cols,), "zeros")]


def head_layout(task: str, config: ModelConfig) -> Layout:
    """
    Head tensors a task adds. Retrieval scores with the pretraining alignment head and adds none.
    """
    pooled = config.pooled_dim
    if task == "vqa":
        return _linear_layout("head.vqa.hidden", pooled, 2 * pooled) + _linear_layout(
            "head.vqa.out", 2 * pooled, config.num_region_classes
        )
    if task == "mc":
        return _linear_layout("head.mc.score", pooled, 1)
    if task == "refexp":
        return _linear_layout("head.refexp.score", config.stream_visual_dim, 1)
    if task == "retrieval":
        return []
    raise ContractError(f"no head is defined for task '{task}'")


def _linear(x: Tensor, model: TwoStreamModel, prefix: str) -> Tensor:
    return ops.add(ops.matmul(x, model[f"{prefix}.weight"]), model[f"{prefix}.bias"])


def vqa_head(h_img: Tensor, h_cls: Tensor, model: TwoStreamModel) -> Tensor:
    """
    Two-layer MLP over the pooled elementwise product; one logit per answer.
    """
    hidden = ops.gelu(_linear(pooled_product(h_img, h_cls, model), model, "head.vqa.hidden"))
    return _linear(hidden, model, "head.vqa.out")


def vqa_logits(
    question: TextInput, image: ImageInput, model: TwoStreamModel, mode: str = "eval", rng=None
) -> Tensor:
    outputs = model.forward(question, image, mode=mode, rng=rng)
    return vqa_head(outputs.h_img, outputs.h_cls, model)


def vqa_accuracy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, float]:
    """
    (soft score of the predicted answer, 1 if it is a best-scoring answer else 0).
    """
    predicted = int(np.argmax(logits))
    return float(min(1.0, targets[predicted])), float(targets[predicted] == targets.max())


def choice_logits(
    pairs: Sequence[Tuple[TextInput, ImageInput]],
    model: TwoStreamModel,
    head: Optional[str] = "head.mc.score",
    mode: str = "eval",
    rng=None,
) -> Tensor:
    """
    One logit per (text, image) candidate, each from its own forward pass, as a 1×k row.
    :param pairs: Candidates
    :param model:
    :param head: Linear head over the pooled product; None scores with the pretraining alignment head
    :param mode:
    :param rng: Dropout source
    :return:
    """
    scores: List[Tensor] = []
    for text, image in pairs:
        outputs = model.forward(text, image, mode=mode, rng=rng)
        if head is None:
            scores.append(alignment_score(outputs.h_img, outputs.h_cls, model))
        else:
            scores.append(_linear(pooled_product(outputs.h_img, outputs.h_cls, model), model, head))
    return ops.transpose(ops.stack_rows(scores))


def multiple_choice_scores(
    options: Sequence[TextInput], image: ImageInput, model: TwoStreamModel, mode: str = "eval", rng=None
) -> Tensor:
    """
    Softmax over the four (question ⧺ option) scores.
    """
    if len(options) != NUM_CHOICES:
        raise ContractError(f"multiple choice needs {NUM_CHOICES} options, got {len(options)}")
    return ops.softmax(choice_logits([(o, image) for o in options], model, mode=mode, rng=rng), axis=-1)


def choice_loss(logits: Tensor, correct: int) -> Tensor:
    return ops.nll(ops.log_softmax(logits, axis=-1), [correct])


def refexp_scores(example: RefExpExample, model: TwoStreamModel, mode: str = "eval", rng=None) -> Tensor:
    """
    One matching logit per proposal region, read off the final visual states; the IMG slot is not scored.
    """
    outputs = model.forward(example.expression, example.image, mode=mode, rng=rng)
    regions = ops.slice_axis(outputs.h_v, 1, outputs.h_v.shape[0], axis=0)
    return ops.reshape(_linear(regions, model, "head.refexp.score"), (example.image.num_regions,))


def refexp_hit(scores: np.ndarray, example: RefExpExample, threshold: float = IOU_THRESHOLD) -> bool:
    """Is the highest scoring proposal a match for the referred box?"""
    return iou(example.image.boxes[int(np.argmax(scores))], example.gt_box) >= threshold


def head_parameter_counts(model: TwoStreamModel, task: str) -> Dict[str, int]:
    head = model.parameter_count(f"head.{task}.")
    return {"head_parameters": head, "base_parameters": model.parameter_count() - head}
