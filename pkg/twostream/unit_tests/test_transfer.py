"""
Unit tests for the transfer tasks.

Tests cover:
- Box overlap, ranking and recall
- Synthetic task data and its files
- Heads, attaching them, and per-task scoring
- Retrieval instances and pool scoring
- Caption sampling from masked positions
- A short fine-tuning run
"""

from dataclasses import replace

import numpy as np
import pytest

from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.data.data_vocab import CLS, MASK, SEP
from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_inputs import TextInput
from twostream.tasks.transfer.transfer_base import get_task, load_task_dataset, write_task_dataset
from twostream.tasks.transfer.transfer_generate import generate_task_dataset
from twostream.tasks.transfer.transfer_heads import (
    choice_logits,
    head_layout,
    head_parameter_counts,
    multiple_choice_scores,
    refexp_hit,
    refexp_scores,
    vqa_accuracy,
)
from twostream.tasks.transfer.transfer_retrieval import (
    NeighborIndex,
    ranks,
    recall_at_k,
    retrieval_finetune_batch,
    retrieval_metrics,
    score_pool,
    zero_shot_retrieval,
)
from twostream.tasks.transfer.transfer_sampling import masked_caption, masked_word_distribution, sample_caption
from twostream.tasks.transfer.transfer_types import NUM_CHOICES, RetrievalPool, iou
from twostream.training.training_config import TrainConfig
from twostream.training.training_loop import finetune


# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------


@pytest.fixture
def fresh_model(tiny_config):
    """TaskMap holds shared task objects, so every test gets its own model to attach heads to."""
    return TwoStreamModel.initialize(tiny_config, seed=1)


@pytest.fixture
def word_ids(tiny_corpus):
    return tiny_corpus.vocabulary().word_ids()


# -------------------------------------------------------------------------------------------------
# Overlap and ranking
# -------------------------------------------------------------------------------------------------


class TestMetrics:
    def test_iou(self):
        assert iou((0.0, 0.0, 1.0, 1.0), (0.0, 0.0, 1.0, 1.0)) == pytest.approx(1.0)
        assert iou((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 1.0, 1.0)) == 0.0
        assert iou((0.0, 0.0, 0.5, 0.25), (0.25, 0.0, 0.75, 0.25)) == pytest.approx(1.0 / 3.0)
        with pytest.raises(ContractError):
            iou((0.5, 0.0, 0.5, 1.0), (0.0, 0.0, 1.0, 1.0))

    def test_ranks_count_strictly_higher_scores(self):
        """A tie with the gold column does not push it down."""
        scores = np.array([[3.0, 1.0, 2.0], [1.0, 1.0, 0.0], [0.0, 5.0, 1.0]])
        np.testing.assert_array_equal(ranks(scores, np.array([0, 1, 0])), [1, 1, 3])

    def test_recall_at_k(self):
        scores = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0]])
        recall = recall_at_k(scores, np.array([0, 0]), ks=(1, 2, 3))
        assert recall == {1: 0.5, 2: 0.5, 3: 1.0}
        with pytest.raises(ContractError):
            recall_at_k(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    def test_recall_grows_with_k(self, rng):
        """Recall never falls as k grows and reaches 1 at the pool size, ties included."""
        scores = rng.integers(0, 3, size=(8, 8)).astype(float)
        recall = recall_at_k(scores, rng.permutation(8), ks=range(1, 9))
        values = [recall[k] for k in range(1, 9)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_random_scores_give_chance_recall(self, rng):
        """A scorer that ignores its inputs finds the gold image first about once per pool size."""
        pool = 10
        hits = [recall_at_k(rng.random((pool, pool)), np.arange(pool), ks=(1,))[1] for _ in range(500)]
        assert np.mean(hits) == pytest.approx(1.0 / pool, abs=0.02)

    def test_retrieval_metrics_follow_the_gold_pairing(self, tiny_examples):
        """Perfect scores stay perfect when the images are reordered."""
        pool = RetrievalPool.from_examples(tiny_examples)
        order = [3, 0, 5, 1, 4, 2]
        permuted = pool.permuted(order)
        scores = np.eye(len(pool))[:, order]
        metrics = retrieval_metrics(scores, permuted, ks=(1,))
        assert metrics == {"recall@1": 1.0, "image_recall@1": 1.0}

    def test_pool_needs_a_bijection(self, tiny_examples):
        pool = RetrievalPool.from_examples(tiny_examples[:2])
        with pytest.raises(ContractError):
            RetrievalPool(images=pool.images, captions=pool.captions, gold=np.array([0, 0]))

    def test_vqa_accuracy(self):
        """(soft score of the prediction, whether it is a best answer)."""
        targets = np.array([0.0, 0.3, 1.0, 0.0])
        assert vqa_accuracy(np.array([0.0, 2.0, 1.0, 0.0]), targets) == (0.3, 0.0)
        assert vqa_accuracy(np.array([0.0, 1.0, 2.0, 0.0]), targets) == (1.0, 1.0)


# -------------------------------------------------------------------------------------------------
# Task data
# -------------------------------------------------------------------------------------------------


class TestTaskData:
    def test_vqa_examples(self, tiny_corpus):
        """Relation questions with a full-credit answer and partial credit for related regions."""
        for example in generate_task_dataset("vqa", tiny_corpus, 10):
            assert example.targets.shape == (tiny_corpus.num_region_classes,)
            assert example.targets.max() == 1.0
            assert set(np.unique(example.targets).tolist()) <= {0.0, 0.3, 1.0}
            assert len(example.question) == 8
            assert example.targets[example.image.class_ids].max() == 1.0

    def test_multiple_choice_examples(self, tiny_corpus):
        """The correct caption names only scene classes; each distractor names an absent one."""
        vocab = tiny_corpus.vocabulary()
        for example in generate_task_dataset("mc", tiny_corpus, 5):
            present = set(example.image.class_ids.tolist())
            assert len(example.answers) == len(example.rationales) == NUM_CHOICES
            for index, answer in enumerate(example.answers):
                named = {vocab.token_class(t) for t in answer} - {-1}
                assert (named <= present) == (index == example.answer)
            reason = {vocab.token_class(t) for t in example.rationales[example.rationale]} - {-1}
            assert reason <= present

    def test_multiple_choice_needs_four_classes(self):
        cfg = GeneratorConfig(num_region_classes=3, min_regions=1, max_regions=2)
        with pytest.raises(ContractError):
            generate_task_dataset("mc", cfg, 1)

    def test_refexp_examples(self, tiny_corpus):
        """Proposals are the scene boxes plus jittered copies; the referred box is among them."""
        for example in generate_task_dataset("refexp", tiny_corpus, 10):
            regions = example.image.num_regions
            assert regions % 2 == 0
            example.image.validate()
            labels = example.labels()
            assert labels.shape == (regions,)
            assert labels.max() == 1.0
            assert len(example.expression) == 8

    def test_retrieval_examples(self, tiny_corpus):
        examples = generate_task_dataset("retrieval", tiny_corpus, 3)
        assert all(isinstance(e, PairedExample) and e.aligned for e in examples)

    def test_generation_is_deterministic(self, tiny_corpus):
        first = generate_task_dataset("vqa", tiny_corpus, 4)
        second = generate_task_dataset("vqa", tiny_corpus, 4)
        for left, right in zip(first, second):
            assert left.image == right.image
            assert left.question == right.question
            np.testing.assert_array_equal(left.targets, right.targets)

    def test_bad_requests(self, tiny_corpus):
        with pytest.raises(ContractError):
            generate_task_dataset("captioning", tiny_corpus, 2)
        with pytest.raises(ContractError):
            generate_task_dataset("vqa", tiny_corpus, 2, split="dev")
        with pytest.raises(ContractError):
            generate_task_dataset("vqa", tiny_corpus, 0)

    def test_task_files(self, tmp_path, tiny_corpus):
        path = tmp_path / "refexp_train.jsonl"
        examples = generate_task_dataset("refexp", tiny_corpus, 3)
        write_task_dataset(path, "refexp", examples, tiny_corpus)
        loaded = load_task_dataset(path, "refexp")
        assert [e.example_id for e in loaded] == [0, 1, 2]
        for left, right in zip(examples, loaded):
            assert left.image == right.image
            assert left.expression == right.expression
            np.testing.assert_array_equal(left.gt_box, right.gt_box)

    def test_task_file_of_another_task(self, tmp_path, tiny_corpus):
        path = tmp_path / "mc_train.jsonl"
        write_task_dataset(path, "mc", generate_task_dataset("mc", tiny_corpus, 2), tiny_corpus)
        assert load_task_dataset(path, "mc")[1].answers
        with pytest.raises(ContractError):
            load_task_dataset(path, "vqa")


# -------------------------------------------------------------------------------------------------
# Heads
# -------------------------------------------------------------------------------------------------


class TestHeads:
    def test_layouts(self, tiny_config):
        assert head_layout("retrieval", tiny_config) == []
        assert [name for name, _, _ in head_layout("mc", tiny_config)] == ["head.mc.score.weight", "head.mc.score.bias"]
        with pytest.raises(ContractError):
            head_layout("captioning", tiny_config)

    def test_attach_adds_the_head_once(self, fresh_model, tiny_config):
        base = fresh_model.parameter_count()
        pooled, classes = tiny_config.pooled_dim, tiny_config.num_region_classes
        expected = pooled * 2 * pooled + 2 * pooled + 2 * pooled * classes + classes
        assert get_task("vqa").attach(fresh_model, seed=0) == expected
        assert get_task("vqa").attach(fresh_model, seed=0) == expected
        assert fresh_model.head_names() == ["vqa"]
        assert head_parameter_counts(fresh_model, "vqa") == {"head_parameters": expected, "base_parameters": base}

    def test_one_head_per_model(self, fresh_model):
        get_task("vqa").attach(fresh_model, seed=0)
        with pytest.raises(ContractError):
            get_task("mc").attach(fresh_model, seed=0)

    def test_check_needs_the_head(self, fresh_model):
        with pytest.raises(ContractError):
            get_task("refexp").check(fresh_model)
        get_task("retrieval").check(fresh_model)

    def test_unknown_task(self):
        with pytest.raises(ContractError):
            get_task("captioning")

    def test_choice_logits(self, fresh_model, tiny_corpus):
        """One logit per option, as a row."""
        get_task("mc").attach(fresh_model, seed=0)
        example = generate_task_dataset("mc", tiny_corpus, 1)[0]
        logits = choice_logits([(t, example.image) for t in example.answer_inputs()], fresh_model)
        assert logits.shape == (1, NUM_CHOICES)
        rationale = choice_logits([(t, example.image) for t in example.rationale_inputs()], fresh_model)
        assert rationale.shape == (1, NUM_CHOICES)

    def test_multiple_choice_scores(self, fresh_model, tiny_corpus):
        """The four options get a probability each."""
        get_task("mc").attach(fresh_model, seed=0)
        example = generate_task_dataset("mc", tiny_corpus, 1)[0]
        probs = multiple_choice_scores(example.answer_inputs(), example.image, fresh_model).numpy()
        assert probs.shape == (1, NUM_CHOICES)
        assert probs.sum() == pytest.approx(1.0)
        with pytest.raises(ContractError):
            multiple_choice_scores(example.answer_inputs()[:3], example.image, fresh_model)

    def test_multiple_choice_scores_follow_the_options(self, fresh_model, tiny_corpus):
        """Reordering the options reorders their probabilities the same way."""
        get_task("mc").attach(fresh_model, seed=0)
        example = generate_task_dataset("mc", tiny_corpus, 1)[0]
        options = example.answer_inputs()
        order = [2, 0, 3, 1]
        probs = multiple_choice_scores(options, example.image, fresh_model).numpy()[0]
        moved = multiple_choice_scores([options[i] for i in order], example.image, fresh_model).numpy()[0]
        np.testing.assert_allclose(moved, probs[order], atol=1e-12)

    def test_refexp_scores_one_per_proposal(self, fresh_model, tiny_corpus):
        get_task("refexp").attach(fresh_model, seed=0)
        example = generate_task_dataset("refexp", tiny_corpus, 1)[0]
        scores = refexp_scores(example, fresh_model)
        assert scores.shape == (example.image.num_regions,)
        target = np.zeros(example.image.num_regions)
        target[int(np.argmax(example.labels()))] = 1.0
        assert refexp_hit(target, example)


# -------------------------------------------------------------------------------------------------
# Retrieval
# -------------------------------------------------------------------------------------------------


class TestRetrieval:
    def test_neighbor_index(self, tiny_examples):
        images = [e.image for e in tiny_examples]
        assert NeighborIndex(images).k == len(images) - 1
        index = NeighborIndex(images, neighbors=2)
        nearest = index.nearest(0)
        assert len(nearest) == 2
        assert 0 not in nearest
        with pytest.raises(ContractError):
            NeighborIndex(images[:1])

    def test_finetune_instance(self, tiny_examples):
        """The true pair first, then a random caption, a random image and a hard negative image."""
        example = tiny_examples[2]
        instance = retrieval_finetune_batch(example, tiny_examples, np.random.default_rng(0))
        assert instance.kinds == ["true", "random_caption", "random_image", "hard_negative"]
        assert instance.label == 0
        assert instance.sources[0] == 2
        assert all(source != 2 for source in instance.sources[1:])
        assert instance.pairs[1][1] == example.image
        assert instance.pairs[2][0] == example.text
        assert instance.pairs[3][0] == example.text

    def test_distractors_differ_from_the_true_pair(self, tiny_examples):
        """Pool members repeating the true caption or image are never drawn as distractors."""
        first, second, third = (TextInput.build([CLS, word, SEP]) for word in (10, 11, 12))
        example = replace(tiny_examples[0], text=first)
        pool = [
            example,
            replace(tiny_examples[1], text=first),
            replace(tiny_examples[2], image=example.image, text=second),
            replace(tiny_examples[3], text=third),
        ]
        for seed in range(20):
            instance = retrieval_finetune_batch(example, pool, np.random.default_rng(seed))
            assert instance.sources[1] in (2, 3)
            assert instance.sources[2] in (1, 3)
            assert instance.sources[3] in (1, 3)
            assert instance.pairs[1][0] != example.text
            assert all(image != example.image for _, image in instance.pairs[2:])
        with pytest.raises(ContractError):
            retrieval_finetune_batch(example, pool[:2], np.random.default_rng(0))

    def test_pool_belongs_to_the_run(self, tiny_model, tiny_examples, word_ids):
        """The shared task object keeps no pool; each run's loss uses the context prepared for it."""
        examples = [replace(e, text=TextInput.build([CLS, int(word_ids[i]), SEP])) for i, e in enumerate(tiny_examples)]
        task = get_task("retrieval")
        first, second = task.prepare(examples[:3]), task.prepare(examples[3:])
        assert [e.example_id for e in first.pool] == [e.example_id for e in examples[:3]]
        assert [e.example_id for e in second.pool] == [e.example_id for e in examples[3:]]
        assert not hasattr(task, "pool")
        rng = np.random.default_rng(0)
        assert np.isfinite(task.loss(examples[0], tiny_model, "eval", rng, first).item())
        with pytest.raises(ContractError):
            task.loss(examples[0], tiny_model, "eval", rng, second)
        with pytest.raises(ContractError):
            task.loss(examples[0], tiny_model, "eval", rng)

    def test_instance_needs_its_example_in_the_pool(self, tiny_examples):
        with pytest.raises(ContractError):
            retrieval_finetune_batch(tiny_examples[0], tiny_examples[1:], np.random.default_rng(0))

    def test_cached_prefix_scores_match(self, tiny_model, tiny_examples):
        pool = RetrievalPool.from_examples(tiny_examples[:3])
        np.testing.assert_allclose(
            score_pool(pool, tiny_model, cache_text=True), score_pool(pool, tiny_model, cache_text=False), atol=1e-12
        )

    def test_zero_shot_retrieval(self, tiny_model, tiny_examples):
        metrics = zero_shot_retrieval(RetrievalPool.from_examples(tiny_examples[:4]), tiny_model, ks=(1, 4))
        assert set(metrics) == {"recall@1", "recall@4", "image_recall@1", "image_recall@4"}
        assert metrics["recall@4"] == metrics["image_recall@4"] == 1.0


# -------------------------------------------------------------------------------------------------
# Caption sampling
# -------------------------------------------------------------------------------------------------


class TestSampling:
    def test_zero_steps_leave_the_masks(self, tiny_model, tiny_examples, word_ids):
        caption = sample_caption(tiny_examples[0].image, tiny_model, 0, np.random.default_rng(0), 4, word_ids)
        assert caption.token_ids.tolist() == [CLS, MASK, MASK, MASK, MASK, SEP]

    def test_sampled_words_come_from_the_pool(self, tiny_model, tiny_examples, word_ids):
        """A full sweep replaces every mask with a non-special word, reproducibly."""
        image = tiny_examples[0].image
        caption = sample_caption(image, tiny_model, 6, np.random.default_rng(0), 3, word_ids)
        assert caption.token_ids[0] == CLS and caption.token_ids[-1] == SEP
        assert np.all(np.isin(caption.token_ids[1:-1], word_ids))
        assert caption == sample_caption(image, tiny_model, 6, np.random.default_rng(0), 3, word_ids)

    def test_redraws_condition_on_a_masked_position(self, tiny_model, tiny_examples, word_ids):
        """The word currently at a position does not inform its own redraw on a later sweep."""
        image = tiny_examples[0].image
        first, second, third = (int(w) for w in word_ids[:3])
        caption = TextInput.build([CLS, first, second, SEP])
        swapped = caption.with_tokens([CLS, third, second, SEP])
        masked = caption.with_tokens([CLS, MASK, second, SEP])
        expected = masked_word_distribution(masked, image, tiny_model, 1, word_ids)
        np.testing.assert_array_equal(masked_word_distribution(caption, image, tiny_model, 1, word_ids), expected)
        np.testing.assert_array_equal(masked_word_distribution(swapped, image, tiny_model, 1, word_ids), expected)
        assert expected.sum() == pytest.approx(1.0)
        assert sample_caption(image, tiny_model, 3, np.random.default_rng(5), 2, word_ids, initial=caption) == (
            sample_caption(image, tiny_model, 3, np.random.default_rng(5), 2, word_ids, initial=swapped)
        )

    def test_a_confident_head_names_the_class(self, fresh_model, tiny_corpus, tiny_examples, word_ids):
        """With the masked word head favouring a scene's class word, most samples contain it."""
        image = tiny_examples[0].image
        class_token = tiny_corpus.vocabulary().class_token(int(image.class_ids[0]))
        fresh_model["pretrain.mlm.bias"].data[class_token] += 30.0
        rng = np.random.default_rng(0)
        samples = [sample_caption(image, fresh_model, 3, rng, 3, word_ids) for _ in range(50)]
        assert sum(class_token in s.token_ids for s in samples) >= 40

    def test_arguments(self, tiny_model, tiny_examples, word_ids):
        image = tiny_examples[0].image
        with pytest.raises(ContractError):
            sample_caption(image, tiny_model, 2, np.random.default_rng(0), 3, word_ids, temperature=0.0)
        with pytest.raises(ContractError):
            sample_caption(image, tiny_model, -1, np.random.default_rng(0), 3, word_ids)
        with pytest.raises(ContractError):
            masked_caption(0)


# -------------------------------------------------------------------------------------------------
# Fine-tuning
# -------------------------------------------------------------------------------------------------


class TestFinetune:
    def test_short_vqa_run(self, fresh_model, tiny_corpus, tmp_path):
        """One epoch writes checkpoints tagged with the task and logs the untrained epoch 0."""
        train = generate_task_dataset("vqa", tiny_corpus, 4)
        val = generate_task_dataset("vqa", tiny_corpus, 2, split="val")
        config = TrainConfig.finetune_preset("vqa", epochs=1, batch_size=2)
        outcome = finetune("vqa", train, val, fresh_model, config, checkpoint_dir=tmp_path)
        assert outcome.checkpoint.kind == "finetune"
        assert outcome.checkpoint.task == "vqa"
        assert (tmp_path / "epoch_001.ckpt").exists()
        assert (tmp_path / "latest.ckpt").exists()
        val_rows = {(r["epoch"], r["metric"]) for r in outcome.metrics if r["split"] == "val"}
        assert {(0, "vqa_score"), (1, "vqa_score"), (1, "accuracy")} <= val_rows
        assert any(r["split"] == "train" and r["metric"] == "loss" for r in outcome.metrics)

    def test_short_retrieval_run(self, fresh_model, tiny_examples):
        config = TrainConfig.finetune_preset("retrieval", epochs=1, batch_size=3)
        outcome = finetune("retrieval", tiny_examples, tiny_examples[:3], fresh_model, config)
        assert outcome.checkpoint.task == "retrieval"
        assert any(r["metric"] == "recall@1" for r in outcome.metrics)

    def test_empty_split(self, fresh_model):
        with pytest.raises(ContractError):
            finetune("vqa", [], [], fresh_model, TrainConfig.finetune_preset("vqa", epochs=1))
