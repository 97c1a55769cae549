#!/usr/bin/env python3

"""
Base transfer task objects and the task map used by fine-tuning and evaluation.
"""

from dataclasses import dataclass
from logging import getLogger
import pathlib
from typing import Any, Dict, List, Optional, Sequence, Type

import numpy as np
from pydantic import BaseModel

from twostream.data.data_io import DatasetHeader, ExampleRecord, read_records, to_examples, write_records
from twostream.data.data_rng import derive_seed
from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.tasks.transfer.transfer_heads import (
    choice_logits,
    choice_loss,
    head_layout,
    refexp_hit,
    refexp_scores,
    vqa_accuracy,
    vqa_logits,
)
from twostream.tasks.transfer.transfer_retrieval import (
    NeighborIndex,
    retrieval_finetune_batch,
    retrieval_metrics,
    score_pool,
)
from twostream.tasks.transfer.transfer_types import (
    MultipleChoiceExample,
    MultipleChoiceRecord,
    QAExample,
    QARecord,
    RefExpExample,
    RefExpRecord,
    RetrievalPool,
)
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor, no_grad


logger = getLogger("twostream")


class TransferTask:
    """
    A fine-tuning target: which head it adds, how one example is scored into a loss, how a split is evaluated.
    """

    name = ""
    record: Type[BaseModel] = ExampleRecord
    metric = ""

    def attach(self, model: TwoStreamModel, seed: int) -> int:
        """
        Add this task's head to the model, unless it is already there.
        :return: Number of head parameters
        """
        existing = model.head_names()
        if existing and existing != [self.name]:
            raise ContractError(f"model carries a '{existing[0]}' head and cannot be fine-tuned for '{self.name}'")
        model.add_parameters(head_layout(self.name, model.config), seed=derive_seed(seed, "head"))
        return model.parameter_count(f"head.{self.name}.")

    def check(self, model: TwoStreamModel) -> None:
        """Raise unless the model can be evaluated on this task."""
        missing = [name for name, _, _ in head_layout(self.name, model.config) if name not in model.params]
        if missing:
            raise ContractError(f"model has no '{self.name}' head (missing {missing[0]})")

    def prepare(self, examples: Sequence) -> Optional[Any]:
        """
        Whatever `loss` needs from the whole training split, handed back to every `loss` call of the run.
        """
        return None

    def loss(
        self, example, model: TwoStreamModel, mode: str, rng: np.random.Generator, context: Optional[Any] = None
    ) -> Tensor:
        raise NotImplementedError

    def evaluate(self, examples: Sequence, model: TwoStreamModel) -> Dict[str, float]:
        raise NotImplementedError


class VQATask(TransferTask):
    name = "vqa"
    record = QARecord
    metric = "vqa_score"

    def loss(self, example: QAExample, model, mode, rng, context=None) -> Tensor:
        logits = vqa_logits(example.question, example.image, model, mode=mode, rng=rng)
        return ops.bce_with_logits(logits, example.targets[None, :])

    def evaluate(self, examples: Sequence[QAExample], model) -> Dict[str, float]:
        scores, hits = [], []
        with no_grad():
            for example in examples:
                logits = vqa_logits(example.question, example.image, model).numpy().reshape(-1)
                score, hit = vqa_accuracy(logits, example.targets)
                scores.append(score)
                hits.append(hit)
        return {"vqa_score": float(np.mean(scores)), "accuracy": float(np.mean(hits))}


class MultipleChoiceTask(TransferTask):
    name = "mc"
    record = MultipleChoiceRecord
    metric = "q_ar"

    def loss(self, example: MultipleChoiceExample, model, mode, rng, context=None) -> Tensor:
        answers = choice_logits([(t, example.image) for t in example.answer_inputs()], model, mode=mode, rng=rng)
        reasons = choice_logits([(t, example.image) for t in example.rationale_inputs()], model, mode=mode, rng=rng)
        return ops.add(choice_loss(answers, example.answer), choice_loss(reasons, example.rationale))

    def evaluate(self, examples: Sequence[MultipleChoiceExample], model) -> Dict[str, float]:
        q_a, qa_r = [], []
        with no_grad():
            for example in examples:
                answers = choice_logits([(t, example.image) for t in example.answer_inputs()], model)
                reasons = choice_logits([(t, example.image) for t in example.rationale_inputs()], model)
                q_a.append(int(np.argmax(answers.numpy())) == example.answer)
                qa_r.append(int(np.argmax(reasons.numpy())) == example.rationale)
        both = np.logical_and(q_a, qa_r)
        return {"q_a": float(np.mean(q_a)), "qa_r": float(np.mean(qa_r)), "q_ar": float(np.mean(both))}


class RefExpTask(TransferTask):
    name = "refexp"
    record = RefExpRecord
    metric = "accuracy"

    def loss(self, example: RefExpExample, model, mode, rng, context=None) -> Tensor:
        return ops.bce_with_logits(refexp_scores(example, model, mode=mode, rng=rng), example.labels())

    def evaluate(self, examples: Sequence[RefExpExample], model) -> Dict[str, float]:
        with no_grad():
            hits = [refexp_hit(refexp_scores(e, model).numpy(), e) for e in examples]
        return {"accuracy": float(np.mean(hits))}


@dataclass(frozen=True)
class RetrievalContext:
    """Distractor pool of one fine-tuning run and the neighbor index over its images."""

    pool: List[PairedExample]
    index: NeighborIndex


class RetrievalTask(TransferTask):
    """
    Four-way choice between the true pair, a random caption, a random image and a hard-negative image, scored
    with the pretraining alignment head.
    """

    name = "retrieval"
    record = ExampleRecord
    metric = "recall@1"

    def prepare(self, examples: Sequence[PairedExample]) -> RetrievalContext:
        pool = list(examples)
        return RetrievalContext(pool=pool, index=NeighborIndex([e.image for e in pool]))

    def loss(self, example, model, mode, rng, context: Optional[RetrievalContext] = None) -> Tensor:
        if context is None:
            raise ContractError("retrieval fine-tuning needs the context prepare() returns for the training pool")
        instance = retrieval_finetune_batch(example, context.pool, rng or np.random.default_rng(0), context.index)
        return choice_loss(choice_logits(instance.pairs, model, head=None, mode=mode, rng=rng), instance.label)

    def evaluate(self, examples: Sequence, model) -> Dict[str, float]:
        pool = RetrievalPool.from_examples(examples)
        return retrieval_metrics(score_pool(pool, model), pool)


# Maps a task name to the object implementing it.
TaskMap: Dict[str, TransferTask] = {
    "vqa": VQATask(),
    "mc": MultipleChoiceTask(),
    "refexp": RefExpTask(),
    "retrieval": RetrievalTask(),
}


def get_task(name: str) -> TransferTask:
    try:
        return TaskMap[name]
    except KeyError:
        raise ContractError(f"unknown transfer task '{name}', expected one of {sorted(TaskMap)}")


def write_task_dataset(path: pathlib.Path, task: str, examples: Sequence, cfg: GeneratorConfig) -> None:
    runner = get_task(task)
    header = DatasetHeader.for_config(cfg, kind=task, count=len(examples))
    write_records(path, header, [runner.record.from_example(e) for e in examples])


def load_task_dataset(path: pathlib.Path, task: str) -> List:
    runner = get_task(task)
    _, records = read_records(path, runner.record, kind=task)
    return to_examples(path, records, task)
