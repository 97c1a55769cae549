#!/usr/bin/env python3

"""
Pretraining and fine-tuning loops.

Both run the same epoch machinery: a seeded shuffle per epoch, one optimizer step per batch, a held-out
evaluation after every epoch (and once before the first, as epoch 0), and a checkpoint per epoch, the
untrained epoch 0 included. Every random draw is keyed on (seed, stream, epoch, example or step), so a resumed run
repeats the uninterrupted one exactly.
"""

from dataclasses import dataclass, field
from logging import getLogger
import math
import pathlib
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from twostream.data.data_rng import derive_rng, derive_seed
from twostream.data.data_types import PairedExample
from twostream.errors import ContractError, NumericalError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_config import ModelConfig
from twostream.processors.process_training import TrainingProcessor
from twostream.tasks.pretrain.pretrain_objectives import COMPONENTS, PretrainBatch, build_batch, pretrain_loss
from twostream.tasks.transfer.transfer_base import TransferTask, get_task
from twostream.tasks.transfer.transfer_heads import head_parameter_counts
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor, backward, no_grad
from twostream.training.training_checkpoint import Checkpoint, save_checkpoint
from twostream.training.training_config import TrainConfig
from twostream.training.training_optim import AdamState, LRSchedule, adam_step, clip_by_global_norm, lr_at


logger = getLogger("twostream")

LAST_GOOD = "last_good.ckpt"
LATEST = "latest.ckpt"


def metric_row(epoch: int, split: str, metric: str, value: float) -> Dict[str, Any]:
    return {"epoch": int(epoch), "split": split, "metric": metric, "value": float(value)}


@dataclass
class RunState:
    """
    Everything a run mutates: the model, the optimizer, the epoch reached and the metric log so far.
    """

    model: TwoStreamModel
    adam: AdamState
    config: TrainConfig
    kind: str
    epoch: int = 0
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def fresh(cls, model: TwoStreamModel, config: TrainConfig, kind: str, **meta) -> "RunState":
        adam = AdamState.for_params(model.params, config.beta1, config.beta2, config.adam_eps)
        return cls(model=model, adam=adam, config=config, kind=kind, meta=dict(meta))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, kind: str) -> "RunState":
        if checkpoint.kind != kind:
            raise ContractError(f"cannot resume a {kind} run from a {checkpoint.kind} checkpoint")
        meta = dict(checkpoint.meta)
        config = TrainConfig(**meta.pop("train_config"))
        epoch = int(meta.pop("epoch"))
        metrics = list(meta.pop("metrics"))
        meta.pop("kind", None)
        adam = checkpoint.restore_adam()
        model = checkpoint.to_model()
        if adam is None:
            adam = AdamState.for_params(model.params, config.beta1, config.beta2, config.adam_eps)
        return cls(model=model, adam=adam, config=config, kind=kind, epoch=epoch, metrics=metrics, meta=meta)

    def checkpoint(self) -> Checkpoint:
        meta = dict(self.meta)
        meta.update(
            kind=self.kind, epoch=self.epoch, step=self.adam.step, train_config=self.config.model_dump(),
            metrics=self.metrics,
        )
        return Checkpoint.from_model(self.model, self.adam, meta)


@dataclass
class TrainingOutcome:
    checkpoint: Checkpoint
    metrics: List[Dict[str, Any]]
    model: TwoStreamModel


def _optimizer_step(state: RunState, schedule: LRSchedule) -> float:
    """Clip, then take one Adam step at the scheduled rate; returns the pre-clip gradient norm."""
    norm = clip_by_global_norm(state.model.params, state.config.grad_clip)
    lr = lr_at(min(state.adam.step + 1, schedule.total_steps), schedule)
    adam_step(state.model.params, state.adam, lr, state.config.weight_decay)
    return norm


def _fit(
    state: RunState,
    num_examples: int,
    batch_loss: Callable[[List[int], int, int], Tuple[Tensor, Dict[str, float], int]],
    evaluate: Callable[[int], List[Dict[str, Any]]],
    checkpoint_dir: Optional[pathlib.Path],
    processors: Sequence[TrainingProcessor],
) -> TrainingOutcome:
    """
    Shared epoch loop.
    :param state: Run to continue; epoch 0 means nothing has been trained yet
    :param num_examples: Size of the training split
    :param batch_loss: (example positions, epoch, batch number) → (loss, train metric sums, weight)
    :param evaluate: epoch → held-out metric rows
    :param checkpoint_dir: Where per-epoch, latest and last-good checkpoints go
    :param processors: Progress hooks
    :return:
    """
    cfg = state.config
    steps_per_epoch = math.ceil(num_examples / cfg.batch_size)
    schedule = LRSchedule.for_run(cfg.peak_lr, cfg.epochs * steps_per_epoch, cfg.warmup_fraction)
    for processor in processors:
        processor.task_started(state.kind, cfg.epochs, state.metrics)

    if state.epoch == 0 and not state.metrics:
        rows = evaluate(0)
        state.metrics.extend(rows)
        if checkpoint_dir is not None:
            save_checkpoint(pathlib.Path(checkpoint_dir) / "epoch_000.ckpt", state.checkpoint())
        for processor in processors:
            processor.epoch_completed(0, rows)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        last_good = state.checkpoint()
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(num_examples)
        sums: Dict[str, float] = {}
        weight = 0
        try:
            for number in range(steps_per_epoch):
                positions = [int(i) for i in order[number * cfg.batch_size:(number + 1) * cfg.batch_size]]
                state.model.zero_grad()
                loss, batch_sums, batch_weight = batch_loss(positions, epoch, number)
                backward(loss)
                norm = _optimizer_step(state, schedule)
                for name, value in batch_sums.items():
                    sums[name] = sums.get(name, 0.0) + value
                weight += batch_weight
                logger.debug("epoch %s step %s loss %.6f grad norm %.4f", epoch, state.adam.step, loss.item(), norm)
        except NumericalError as e:
            logger.error("Training diverged in epoch %s: %s", epoch, str(e))
            if checkpoint_dir is not None:
                save_checkpoint(pathlib.Path(checkpoint_dir) / LAST_GOOD, last_good)
                logger.error("Saved the last good checkpoint (epoch %s) to %s", last_good.meta["epoch"], checkpoint_dir)
            e.checkpoint = last_good
            raise

        rows = [metric_row(epoch, "train", name, value / max(weight, 1)) for name, value in sums.items()]
        rows += evaluate(epoch)
        state.epoch = epoch
        state.metrics.extend(rows)
        if checkpoint_dir is not None:
            checkpoint = state.checkpoint()
            save_checkpoint(pathlib.Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt", checkpoint)
            save_checkpoint(pathlib.Path(checkpoint_dir) / LATEST, checkpoint)
        for processor in processors:
            processor.epoch_completed(epoch, rows)

    for processor in processors:
        processor.task_completed(state.kind, state.metrics)
    return TrainingOutcome(checkpoint=state.checkpoint(), metrics=state.metrics, model=state.model)


# Pretraining


def evaluate_pretrain(batch: PretrainBatch, model: TwoStreamModel, chunk: int = 64) -> Dict[str, float]:
    """
    Component losses, their total and alignment accuracy over prepared items, averaged over items.
    """
    if not batch:
        raise ContractError("evaluation needs at least one item")
    sums = {name: 0.0 for name in COMPONENTS}
    correct = 0
    with no_grad():
        for start in range(0, len(batch), chunk):
            part = batch[start:start + chunk]
            result = pretrain_loss(part, model)
            for name in COMPONENTS:
                sums[name] += result.components[name] * len(part)
            correct += result.correct
    metrics = {name: value / len(batch) for name, value in sums.items()}
    metrics["total"] = sum(metrics[name] for name in COMPONENTS)
    metrics["alignment_accuracy"] = correct / len(batch)
    return metrics


def pretrain(
    train: Sequence[PairedExample],
    val: Sequence[PairedExample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    word_ids: np.ndarray,
    checkpoint_dir: Optional[pathlib.Path] = None,
    resume: Optional[Checkpoint] = None,
    processors: Sequence[TrainingProcessor] = (),
    meta: Optional[Dict[str, Any]] = None,
) -> TrainingOutcome:
    """
    Masked multi-modal modelling plus alignment prediction, unit-weighted.
    :param train: Aligned training pairs
    :param val: Held-out pairs for the per-epoch metrics
    :param model_config: Architecture of a fresh model (ignored when resuming)
    :param train_config: Loop settings (ignored when resuming; the checkpoint's are used)
    :param word_ids: Non-special vocabulary ids for random-word replacement
    :param checkpoint_dir: Where checkpoints go
    :param resume: Continue this pretraining checkpoint
    :param processors: Progress hooks
    :param meta: Extra run facts stored in every checkpoint (data fraction, corpus settings)
    :return:
    """
    if not train:
        raise ContractError("pretraining needs a non-empty training set")
    if len(train) < 2 or len(val) < 2:
        raise ContractError("pretraining needs at least 2 training and 2 validation pairs to draw negatives")
    if resume is not None:
        state = RunState.from_checkpoint(resume, kind="pretrain")
    else:
        model = TwoStreamModel.initialize(model_config, seed=derive_seed(train_config.seed, "init"))
        state = RunState.fresh(model, train_config, kind="pretrain", seed=train_config.seed, **(meta or {}))
    cfg = state.config
    logger.info("Pretraining %s parameters on %s pairs", state.model.parameter_count(), len(train))

    val_batch = build_batch(
        val, val, word_ids, derive_seed(cfg.seed, "eval"), 0, cfg.text_mask_rate, cfg.region_mask_rate,
        cfg.mask_negatives,
    )

    def batch_loss(positions: List[int], epoch: int, number: int):
        examples = [train[i] for i in positions]
        batch = build_batch(
            examples, train, word_ids, cfg.seed, epoch, cfg.text_mask_rate, cfg.region_mask_rate, cfg.mask_negatives
        )
        result = pretrain_loss(batch, state.model, mode="train", rng=derive_rng(cfg.seed, "dropout", epoch, number))
        sums = {name: value * result.count for name, value in result.components.items()}
        sums["total"] = result.total.item() * result.count
        sums["alignment_accuracy"] = float(result.correct)
        return result.total, sums, result.count

    def evaluate(epoch: int) -> List[Dict[str, Any]]:
        metrics = evaluate_pretrain(val_batch, state.model)
        return [metric_row(epoch, "val", name, value) for name, value in metrics.items()]

    return _fit(state, len(train), batch_loss, evaluate, checkpoint_dir, processors)


# Fine-tuning


def finetune(
    task: str,
    train: Sequence,
    evaluation: Sequence,
    model: TwoStreamModel,
    train_config: TrainConfig,
    checkpoint_dir: Optional[pathlib.Path] = None,
    pretrained: bool = True,
    processors: Sequence[TrainingProcessor] = (),
    meta: Optional[Dict[str, Any]] = None,
) -> TrainingOutcome:
    """
    Attach the task head and train the whole model end to end.
    :param task: vqa, mc, refexp or retrieval
    :param train: Task training examples
    :param evaluation: Task examples for the per-epoch metric
    :param model: Pretrained model, or a fresh one for the no-pretraining baseline
    :param train_config:
    :param checkpoint_dir:
    :param pretrained: Recorded in the checkpoint; False marks the no-pretraining baseline
    :param processors:
    :param meta: Extra run facts stored in every checkpoint
    :return:
    """
    runner: TransferTask = get_task(task)
    if not train or not evaluation:
        raise ContractError(f"fine-tuning {task} needs non-empty training and evaluation sets")
    runner.attach(model, train_config.seed)
    counts = head_parameter_counts(model, task)
    logger.info(
        "Fine-tuning %s: %s head parameters on top of %s base parameters",
        task,
        counts["head_parameters"],
        counts["base_parameters"],
    )
    context = runner.prepare(train)
    state = RunState.fresh(
        model, train_config, kind="finetune", task=task, pretrained=pretrained, **counts, **(meta or {})
    )
    cfg = state.config

    def batch_loss(positions: List[int], epoch: int, number: int):
        losses = []
        for position in positions:
            example = train[position]
            rng = derive_rng(cfg.seed, "negative", epoch, position)
            losses.append(runner.loss(example, state.model, "train", rng, context))
        loss = losses[0]
        for term in losses[1:]:
            loss = ops.add(loss, term)
        loss = ops.scale(loss, 1.0 / len(losses))
        return loss, {"loss": loss.item() * len(losses)}, len(losses)

    def evaluate(epoch: int) -> List[Dict[str, Any]]:
        metrics = runner.evaluate(evaluation, state.model)
        return [metric_row(epoch, "val", name, value) for name, value in metrics.items()]

    return _fit(state, len(train), batch_loss, evaluate, checkpoint_dir, processors)
