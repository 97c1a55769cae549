"""
Unit tests for optimization, checkpoints and the training loops.

Tests cover:
- The learning rate schedule, gradient clipping and Adam
- Training presets
- Checkpoint encoding, corruption and version checks
- Pretraining determinism, resumption and metric logging
- Gradient check reporting
"""

import csv
import hashlib
import struct

import numpy as np
import pytest

from twostream.data.data_generate import generate_dataset
from twostream.data.data_rng import derive_seed
from twostream.errors import (
    ContractError,
    IntegrityError,
    NumericalError,
    ParseError,
    VersionMismatchError,
)
from twostream.model.model_base import TwoStreamModel
from twostream.processors.process_training import ProcessTraining, final_metrics
from twostream.training.training_check import require_passing, run_gradcheck
from twostream.training.training_checkpoint import (
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from twostream.training.training_config import TrainConfig
from twostream.training.training_loop import RunState, metric_row, pretrain
from twostream.training.training_optim import (
    AdamState,
    LRSchedule,
    adam_step,
    clip_by_global_norm,
    global_norm,
    lr_at,
)
from twostream.training.training_results import RunResults
from twostream.tensor.tensor_base import Tensor


# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------


@pytest.fixture
def splits(tiny_corpus):
    return generate_dataset(tiny_corpus, 4), generate_dataset(tiny_corpus, 2, "val")


@pytest.fixture
def word_ids(tiny_corpus):
    return tiny_corpus.vocabulary().word_ids()


@pytest.fixture
def two_epochs():
    return TrainConfig(epochs=2, batch_size=2, peak_lr=1e-3)


@pytest.fixture
def checkpoint(tiny_model):
    adam = AdamState.for_params(tiny_model.params)
    adam.step = 3
    return Checkpoint.from_model(tiny_model, adam, {"kind": "pretrain", "epoch": 1, "note": "x"})


def _params(**values):
    return {name: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for name, v in values.items()}


# -------------------------------------------------------------------------------------------------
# Optimization
# -------------------------------------------------------------------------------------------------


class TestSchedule:
    """Linear warmup to the peak, then linear decay to zero."""

    def test_shape(self):
        schedule = LRSchedule(peak_lr=1.0, warmup_steps=2, total_steps=10)
        assert [lr_at(s, schedule) for s in (0, 1, 2, 6, 10)] == pytest.approx([0.0, 0.5, 1.0, 0.5, 0.0])

    def test_out_of_range_steps(self):
        schedule = LRSchedule(peak_lr=1.0, warmup_steps=2, total_steps=10)
        with pytest.raises(ContractError):
            lr_at(11, schedule)
        with pytest.raises(ContractError):
            lr_at(-1, schedule)

    def test_bad_schedules(self):
        with pytest.raises(ContractError):
            LRSchedule(peak_lr=1.0, warmup_steps=0, total_steps=10)
        with pytest.raises(ContractError):
            LRSchedule(peak_lr=1.0, warmup_steps=10, total_steps=10)

    def test_for_run(self):
        """Ten percent warmup; a one-step run is stretched to two."""
        assert LRSchedule.for_run(1e-4, 100) == LRSchedule(peak_lr=1e-4, warmup_steps=10, total_steps=100)
        assert LRSchedule.for_run(1e-4, 1) == LRSchedule(peak_lr=1e-4, warmup_steps=1, total_steps=2)


class TestClipping:
    def test_clips_to_the_global_norm(self):
        params = _params(a=[0.0, 0.0], b=[0.0])
        params["a"].grad = np.array([3.0, 0.0])
        params["b"].grad = np.array([4.0])
        assert clip_by_global_norm(params, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(params["a"].grad, [0.6, 0.0])
        np.testing.assert_allclose(params["b"].grad, [0.8])
        assert global_norm(params) == pytest.approx(1.0)

    def test_small_or_disabled(self):
        params = _params(a=[0.0])
        params["a"].grad = np.array([0.5])
        clip_by_global_norm(params, 1.0)
        np.testing.assert_allclose(params["a"].grad, [0.5])
        params["a"].grad = np.array([50.0])
        clip_by_global_norm(params, 0.0)
        np.testing.assert_allclose(params["a"].grad, [50.0])


class TestAdam:
    def test_first_step_moves_by_the_learning_rate(self):
        """After bias correction the first update is lr * sign(g)."""
        params = _params(w=[0.0, 0.0])
        params["w"].grad = np.array([1.0, -2.0])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        np.testing.assert_allclose(params["w"].data, [-0.1, 0.1], atol=1e-6)
        assert state.step == 1

    def test_zero_gradient_changes_nothing(self):
        params = _params(w=[1.5])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, [1.5])

    def test_decoupled_weight_decay(self):
        """Decay shrinks the weight directly, without touching the moments."""
        params = _params(w=[2.0])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(params["w"].data, [1.9])
        np.testing.assert_array_equal(state.m["w"], [0.0])

    def test_non_finite_gradient(self):
        params = _params(w=[1.0], v=[1.0])
        params["v"].grad = np.array([np.nan])
        state = AdamState.for_params(params)
        with pytest.raises(NumericalError, match="'v'"):
            adam_step(params, state, lr=0.1)
        assert state.step == 0
        np.testing.assert_array_equal(params["w"].data, [1.0])

    def test_new_parameters_get_zero_moments(self):
        state = AdamState.for_params(_params(w=[1.0]))
        params = _params(w=[1.0], head=[0.0, 0.0])
        state.ensure(params)
        np.testing.assert_array_equal(state.v["head"], [0.0, 0.0])
        with pytest.raises(ContractError):
            state.ensure(_params(w=[1.0, 2.0]))


class TestPresets:
    def test_finetune_presets(self):
        desk = TrainConfig.finetune_preset("vqa")
        assert (desk.epochs, desk.batch_size, desk.peak_lr) == (10, 16, 1e-4)
        paper = TrainConfig.finetune_preset("vqa", scale="paper")
        assert (paper.epochs, paper.batch_size, paper.peak_lr) == (20, 256, 4e-5)
        assert TrainConfig.finetune_preset("mc", scale="paper").batch_size == 64
        assert TrainConfig.finetune_preset("refexp", epochs=3).epochs == 3
        with pytest.raises(ContractError):
            TrainConfig.finetune_preset("captioning")

    def test_pretrain_preset(self):
        assert TrainConfig.pretrain_preset("paper").batch_size == 512
        assert TrainConfig.pretrain_preset(batch_size=4).batch_size == 4
        with pytest.raises(ValueError):
            TrainConfig(momentum=0.9)


# -------------------------------------------------------------------------------------------------
# Checkpoints
# -------------------------------------------------------------------------------------------------


class TestCheckpoint:
    def test_reencoding_is_byte_identical(self, checkpoint):
        blob = encode_checkpoint(checkpoint)
        assert encode_checkpoint(decode_checkpoint(blob)) == blob

    def test_round_trip(self, checkpoint, tiny_model, tmp_path):
        """Parameters, optimizer state, config and metadata all come back."""
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        loaded = load_checkpoint(path)
        restored = loaded.to_model()
        assert restored.config == tiny_model.config
        for name, tensor in tiny_model.named_parameters():
            np.testing.assert_array_equal(restored[name].data, tensor.data)
        assert loaded.adam.step == 3
        assert loaded.meta["note"] == "x"
        assert loaded.kind == "pretrain"
        assert loaded.task is None

    def test_corruption_is_detected(self, checkpoint):
        blob = bytearray(encode_checkpoint(checkpoint))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(IntegrityError):
            decode_checkpoint(bytes(blob))

    def test_not_a_checkpoint(self):
        with pytest.raises(ParseError):
            decode_checkpoint(b"PK\x03\x04" + bytes(64))

    def test_version_mismatch(self, checkpoint):
        """A newer format version with a valid digest is refused by version, not by checksum."""
        body = encode_checkpoint(checkpoint)[:-32]
        body = body[: len(MAGIC)] + struct.pack("<I", 2) + body[len(MAGIC) + 4:]
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(body + hashlib.sha256(body).digest())

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nowhere.ckpt")

    def test_resume_needs_the_same_kind(self, checkpoint):
        with pytest.raises(ContractError):
            RunState.from_checkpoint(checkpoint, kind="finetune")


# -------------------------------------------------------------------------------------------------
# Pretraining runs
# -------------------------------------------------------------------------------------------------


class TestPretrain:
    def test_runs_are_deterministic(self, splits, tiny_config, two_epochs, word_ids):
        train, val = splits
        first = pretrain(train, val, tiny_config, two_epochs, word_ids)
        second = pretrain(train, val, tiny_config, two_epochs, word_ids)
        for name, array in first.model.snapshot().items():
            np.testing.assert_array_equal(second.model[name].data, array)
        assert first.metrics == second.metrics

    def test_training_changes_the_weights(self, splits, tiny_config, two_epochs, word_ids):
        train, val = splits
        outcome = pretrain(train, val, tiny_config, two_epochs, word_ids)
        untrained = TwoStreamModel.initialize(tiny_config, seed=derive_seed(two_epochs.seed, "init"))
        assert any(
            not np.array_equal(untrained[name].data, tensor.data) for name, tensor in outcome.model.named_parameters()
        )

    def test_resume_repeats_the_uninterrupted_run(self, splits, tiny_config, two_epochs, word_ids, tmp_path):
        """Continuing from the first epoch's checkpoint ends exactly where the full run ends."""
        train, val = splits
        full = pretrain(train, val, tiny_config, two_epochs, word_ids, checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch_002.ckpt").exists()
        resumed = pretrain(
            train, val, tiny_config, two_epochs, word_ids, resume=load_checkpoint(tmp_path / "epoch_001.ckpt")
        )
        for name, tensor in full.model.named_parameters():
            np.testing.assert_array_equal(resumed.model[name].data, tensor.data)
        assert resumed.metrics == full.metrics
        assert load_checkpoint(tmp_path / "latest.ckpt").meta["epoch"] == 2

    def test_untrained_checkpoint(self, splits, tiny_config, two_epochs, word_ids, tmp_path):
        """epoch_000 holds the initial weights and resumes into the same run."""
        train, val = splits
        full = pretrain(train, val, tiny_config, two_epochs, word_ids, checkpoint_dir=tmp_path)
        untrained = load_checkpoint(tmp_path / "epoch_000.ckpt")
        assert untrained.kind == "pretrain"
        assert untrained.meta["epoch"] == 0
        initial = TwoStreamModel.initialize(tiny_config, seed=derive_seed(two_epochs.seed, "init"))
        for name, array in untrained.to_model().snapshot().items():
            np.testing.assert_array_equal(initial[name].data, array)
        resumed = pretrain(train, val, tiny_config, two_epochs, word_ids, resume=untrained)
        for name, tensor in full.model.named_parameters():
            np.testing.assert_array_equal(resumed.model[name].data, tensor.data)
        assert resumed.metrics == full.metrics

    def test_metric_rows(self, splits, tiny_config, two_epochs, word_ids):
        """Held-out metrics before training and after each epoch, training averages after each epoch."""
        train, val = splits
        rows = pretrain(train, val, tiny_config, two_epochs, word_ids).metrics
        val_epochs = {r["epoch"] for r in rows if r["split"] == "val" and r["metric"] == "total"}
        train_epochs = {r["epoch"] for r in rows if r["split"] == "train" and r["metric"] == "total"}
        assert val_epochs == {0, 1, 2}
        assert train_epochs == {1, 2}
        metrics = {r["metric"] for r in rows}
        assert {"masked_text", "masked_region", "alignment", "alignment_accuracy"} <= metrics
        assert all(np.isfinite(r["value"]) for r in rows)

    def test_too_little_data(self, splits, tiny_config, two_epochs, word_ids):
        train, val = splits
        with pytest.raises(ContractError):
            pretrain(train[:1], val, tiny_config, two_epochs, word_ids)

    def test_processor_writes_run_files(self, splits, tiny_config, two_epochs, word_ids, tmp_path):
        train, val = splits
        processor = ProcessTraining(tmp_path, RunResults(name="run", command="pretrain", seed=0))
        pretrain(train, val, tiny_config, two_epochs, word_ids, processors=[processor])
        with (tmp_path / "metrics.csv").open() as metrics_file:
            rows = list(csv.DictReader(metrics_file))
        assert {row["epoch"] for row in rows} == {"0", "1", "2"}
        with (tmp_path / "results.csv").open() as results_file:
            (result,) = list(csv.DictReader(results_file))
        assert result["command"] == "pretrain"
        assert "alignment_accuracy" in result


class TestFinalMetrics:
    def test_last_held_out_epoch(self):
        rows = [
            metric_row(0, "val", "accuracy", 0.2),
            metric_row(1, "train", "loss", 0.9),
            metric_row(1, "val", "accuracy", 0.6),
        ]
        assert final_metrics(rows) == {"accuracy": 0.6}

    def test_train_only(self):
        assert final_metrics([metric_row(2, "train", "loss", 0.5)]) == {"loss": 0.5}
        assert final_metrics([]) == {}


class TestRunResults:
    def test_columns(self):
        """Run facts lead, then the finish time, extras and metrics; the name stays off the row."""
        results = RunResults(name="run", command="eval", task="vqa", run_finished="t", scope="x")
        results.record_metrics({"vqa_score": 0.5})
        assert list(results)[:10] == [
            "command", "architecture", "num_co_blocks", "task", "pretrained", "data_fraction", "seed", "epochs",
            "run_finished", "scope",
        ]
        assert results["vqa_score"] == 0.5
        assert "name" not in results
        assert results.name == "run"

    def test_metrics_cannot_replace_run_facts(self):
        with pytest.raises(ValueError):
            RunResults(name="run", command="eval").record_metrics({"seed": 1.0})


# -------------------------------------------------------------------------------------------------
# Gradient check reporting
# -------------------------------------------------------------------------------------------------


class TestGradcheckReport:
    def test_op_scope(self):
        errors, tolerance = run_gradcheck("op", seed=0)
        require_passing(errors, tolerance)

    def test_failures_name_the_worst_case(self):
        with pytest.raises(NumericalError, match="worst is b"):
            require_passing({"a": 1e-6, "b": 0.5, "c": 1e-2}, 1e-4)

    def test_unknown_scope(self):
        with pytest.raises(ContractError):
            run_gradcheck("everything")
