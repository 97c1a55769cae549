#!/usr/bin/env python3

"""
Finite-difference suites above single ops: attention blocks and heads on random widths, and a spot check of
sampled parameters of a whole tiny model through the pretraining loss. Everything runs in 64-bit.
"""

from logging import getLogger
from typing import Callable, Dict, List, Tuple

import numpy as np

from twostream.data.data_generate import generate_dataset
from twostream.data.data_types import GeneratorConfig
from twostream.errors import ContractError, NumericalError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_config import AttentionConfig, ModelConfig
from twostream.model.model_layers import BlockParams, co_attention_block, transformer_block
from twostream.tasks.pretrain.pretrain_objectives import alignment_score, build_batch, pretrain_loss
from twostream.tasks.transfer.transfer_heads import head_layout, vqa_head
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor
from twostream.tensor.tensor_check import GRADCHECK_TOLERANCE, gradcheck, projected, run_op_suite


logger = getLogger("twostream")

SCOPES = ("op", "block", "model")
MODEL_TOLERANCE = 1e-3
MODEL_SAMPLES = 20
# Block weights are drawn wider than at training time so attention is far from uniform.
BLOCK_INIT_STD = 0.5


def _random(rng: np.random.Generator, shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name, dtype=np.float64)


def _block_tensors(params: BlockParams) -> List[Tensor]:
    return [t for t in (getattr(params, n) for n in BlockParams.tensor_names()) if t is not None]


def _attention_config(rng: np.random.Generator) -> AttentionConfig:
    heads = int(rng.integers(1, 3))
    head_dim = int(rng.integers(2, 4))
    width = heads * head_dim
    return AttentionConfig(model_dim=width, num_heads=heads, head_dim=head_dim, ffn_dim=2 * width, cross_dim=width)


def tiny_model_config(**overrides) -> ModelConfig:
    """A few hundred parameters: small enough to finite-difference, deep enough to cross every block type."""
    settings = dict(
        text_vocab_size=32,
        max_text_len=12,
        text_dim=8,
        text_heads=2,
        text_pre_fusion_layers=1,
        num_co_blocks=1,
        visual_dim=6,
        visual_heads=2,
        visual_feature_dim=5,
        num_region_classes=4,
        pooled_dim=4,
        ffn_multiplier=2,
        init_std=0.3,
        dtype="float64",
    )
    settings.update(overrides)
    return ModelConfig(**settings)


def tiny_generator_config(model_config: ModelConfig, seed: int = 0) -> GeneratorConfig:
    return GeneratorConfig(
        num_region_classes=model_config.num_region_classes,
        visual_feature_dim=model_config.visual_feature_dim,
        min_regions=2,
        max_regions=3,
        caption_templates=["single", "pair"],
        seed=seed,
    )


def _block_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    text_cfg = _attention_config(rng)
    visual_cfg = _attention_config(rng)
    t_w, t_v = (int(n) for n in rng.integers(2, 5, size=2))
    h_w = _random(rng, (t_w, text_cfg.model_dim), "h_w")
    h_v = _random(rng, (t_v, visual_cfg.model_dim), "h_v")
    mask = [True] * (t_w - 1) + [False]

    trm = BlockParams.initialize(text_cfg, rng, std=BLOCK_INIT_STD, dtype="float64")
    co_v = BlockParams.initialize(
        visual_cfg.model_copy(update={"cross_dim": text_cfg.model_dim}), rng, std=BLOCK_INIT_STD, dtype="float64"
    )
    co_w = BlockParams.initialize(
        text_cfg.model_copy(update={"cross_dim": visual_cfg.model_dim}), rng, std=BLOCK_INIT_STD, dtype="float64"
    )
    bare_v = BlockParams.initialize(
        visual_cfg.model_copy(update={"cross_dim": text_cfg.model_dim}),
        rng,
        std=BLOCK_INIT_STD,
        dtype="float64",
        with_ffn=False,
    )
    bare_w = BlockParams.initialize(
        text_cfg.model_copy(update={"cross_dim": visual_cfg.model_dim}),
        rng,
        std=BLOCK_INIT_STD,
        dtype="float64",
        with_ffn=False,
    )
    seeds = [int(s) for s in rng.integers(0, 2 ** 31, size=2)]

    def one(out: Tensor) -> Tensor:
        return projected(out, np.random.default_rng(seeds[0]))

    def both(pair: Tuple[Tensor, Tensor]) -> Tensor:
        return ops.add(
            projected(pair[0], np.random.default_rng(seeds[0])), projected(pair[1], np.random.default_rng(seeds[1]))
        )

    model = TwoStreamModel.initialize(
        tiny_model_config(text_dim=text_cfg.model_dim, text_heads=text_cfg.num_heads),
        seed=int(rng.integers(0, 2 ** 31)),
    )
    model.add_parameters(head_layout("vqa", model.config), seed=int(rng.integers(0, 2 ** 31)))
    h_img = _random(rng, (1, model.config.visual_dim), "h_img")
    h_cls = _random(rng, (1, model.config.text_dim), "h_cls")
    heads = [model[n] for n in model.params if n.startswith(("pool.", "pretrain.align", "head.vqa."))]

    return {
        "transformer_block": (lambda: one(transformer_block(h_w, trm)), [h_w] + _block_tensors(trm)),
        "masked_transformer_block": (
            lambda: one(transformer_block(h_w, trm, mask)),
            [h_w] + _block_tensors(trm),
        ),
        "co_attention_block": (
            lambda: both(co_attention_block(h_v, h_w, co_v, co_w)),
            [h_v, h_w] + _block_tensors(co_v) + _block_tensors(co_w),
        ),
        "co_attention_block_without_ffn": (
            lambda: both(co_attention_block(h_v, h_w, bare_v, bare_w, mask_w=mask)),
            [h_v, h_w] + _block_tensors(bare_v) + _block_tensors(bare_w),
        ),
        "alignment_head": (lambda: one(alignment_score(h_img, h_cls, model)), [h_img, h_cls] + heads),
        "vqa_head": (lambda: one(vqa_head(h_img, h_cls, model)), [h_img, h_cls] + heads),
    }


def run_block_suite(seed: int = 0, shapes: int = 5) -> Dict[str, float]:
    """
    Gradient-check both block types (with and without key masking or a feed-forward sub-layer) and the pooled
    heads on several random widths.
    :return: The worst relative error seen per case
    """
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(shapes):
        for name, (fn, inputs) in _block_cases(rng).items():
            result = gradcheck(fn, inputs)
            worst[name] = max(worst.get(name, 0.0), result.max_relative_error)
            logger.debug(
                "gradcheck %s: %.3e over %s entries (worst %s)",
                name,
                result.max_relative_error,
                result.checked,
                result.worst,
            )
    return worst


def run_model_suite(seed: int = 0, samples: int = MODEL_SAMPLES) -> Dict[str, float]:
    """
    Spot-check `samples` distinct parameters of a tiny two-stream model, one random entry each, through the full
    pretraining loss on two masked pairs and their negatives.
    :return: Relative error per checked parameter
    """
    config = tiny_model_config()
    model = TwoStreamModel.initialize(config, seed=seed)
    examples = generate_dataset(tiny_generator_config(config, seed), 2)
    vocab = tiny_generator_config(config, seed).vocabulary()
    if len(vocab) > config.text_vocab_size:
        raise ContractError(f"vocabulary of {len(vocab)} words does not fit the check model")
    batch = build_batch(examples, examples, vocab.word_ids(), seed, 0, text_rate=0.5, region_rate=0.5)

    def loss() -> Tensor:
        return pretrain_loss(batch, model).total

    rng = np.random.default_rng(seed)
    names = list(model.params)
    chosen = [names[i] for i in sorted(rng.choice(len(names), size=min(samples, len(names)), replace=False))]
    errors: Dict[str, float] = {}
    for name in chosen:
        result = gradcheck(loss, [model[name]], samples=1, rng=rng)
        errors[name] = result.max_relative_error
        logger.debug("gradcheck %s: %.3e", name, result.max_relative_error)
    return errors


def run_gradcheck(scope: str, seed: int = 0) -> Tuple[Dict[str, float], float]:
    """
    :return: Worst relative error per checked case and the tolerance the scope must stay under
    """
    if scope == "op":
        return run_op_suite(seed), GRADCHECK_TOLERANCE
    if scope == "block":
        return run_block_suite(seed), GRADCHECK_TOLERANCE
    if scope == "model":
        return run_model_suite(seed), MODEL_TOLERANCE
    raise ContractError(f"gradcheck scope must be one of {SCOPES}, got '{scope}'")


def require_passing(errors: Dict[str, float], tolerance: float) -> None:
    failing = sorted((name for name, error in errors.items() if not error < tolerance), key=lambda n: -errors[n])
    if failing:
        worst = failing[0]
        raise NumericalError(
            f"gradient check failed for {', '.join(failing)}: worst is {worst} with relative error "
            f"{errors[worst]:.3e} (tolerance {tolerance:.0e})"
        )
