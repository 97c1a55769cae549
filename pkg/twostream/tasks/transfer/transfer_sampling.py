#!/usr/bin/env python3

"""
Caption generation by resampling masked words: start from CLS MASK ... MASK SEP and repeatedly redraw one
position from the masked word head's distribution, sweeping the positions in order.
"""

from typing import Optional

import numpy as np

from twostream.data.data_vocab import CLS, MASK, SEP
from twostream.errors import ContractError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_inputs import ImageInput, TextInput
from twostream.tensor.tensor_base import no_grad


def masked_caption(length: int) -> TextInput:
    if length < 1:
        raise ContractError(f"caption length must be at least 1, got {length}")
    return TextInput.build([CLS] + [MASK] * length + [SEP])


def masked_word_distribution(
    text: TextInput,
    image: ImageInput,
    model: TwoStreamModel,
    position: int,
    word_ids: np.ndarray,
    temperature: float = 1.0,
) -> np.ndarray:
    """
    Probability of each of `word_ids` at `position` with that position replaced by MASK, so the current word there
    never conditions its own redraw.
    """
    tokens = text.token_ids.copy()
    tokens[position] = MASK
    weight, bias = model["pretrain.mlm.weight"].data, model["pretrain.mlm.bias"].data
    with no_grad():
        outputs = model.forward(text.with_tokens(tokens), image)
    logits = (outputs.h_w.data[position] @ weight + bias)[word_ids].astype(np.float64) / temperature
    probs = np.exp(logits - logits.max())
    return probs / probs.sum()


def sample_caption(
    image: ImageInput,
    model: TwoStreamModel,
    steps: int,
    rng: np.random.Generator,
    length: int,
    word_ids: np.ndarray,
    temperature: float = 1.0,
    initial: Optional[TextInput] = None,
) -> TextInput:
    """
    :param image: Scene to describe
    :param model: Pretrained model
    :param steps: Number of single-position resampling steps
    :param rng: Source of the draws
    :param length: Words between CLS and SEP; ignored when starting from `initial`
    :param word_ids: Vocabulary ids a position may take (never special tokens)
    :param temperature: Logits are divided by this before the softmax
    :param initial: Start from this caption instead of all MASK
    :return:
    """
    if steps < 0:
        raise ContractError(f"steps must be non-negative, got {steps}")
    if temperature <= 0.0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    text = initial if initial is not None else masked_caption(length)
    length = len(text) - 2
    if steps and length < 1:
        raise ContractError("there is no word position to resample")
    for step in range(steps):
        position = 1 + step % length
        probs = masked_word_distribution(text, image, model, position, word_ids, temperature)
        tokens = text.token_ids.copy()
        tokens[position] = word_ids[int(rng.choice(len(word_ids), p=probs))]
        text = text.with_tokens(tokens)
    return text
