#!/usr/bin/env python3

"""
The synthetic word table: special tokens, function words, relation words and one word per region class.
"""

from typing import Dict, List, Sequence

import numpy as np

from twostream.errors import ContractError, TokenIndexError


PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
SPECIAL_IDS = frozenset((PAD, CLS, SEP, MASK))

FUNCTION_WORDS = ("a", "the", "and", "of", "is", "what", "in", "image", "why", "because")
RELATION_WORDS = ("left", "right", "above", "below")
CLASS_NAMES = (
    "circle",
    "square",
    "triangle",
    "star",
    "ring",
    "cross",
    "heart",
    "moon",
    "arrow",
    "diamond",
    "hexagon",
    "spiral",
)


class Vocabulary:
    """
    Dense word ↔ id table. Ids 0-3 are the special tokens, followed by function words, relation words and
    then exactly one word per region class, in class order.
    """

    def __init__(self, words: Sequence[str], num_classes: int) -> None:
        if len(set(words)) != len(words):
            raise ContractError("vocabulary words must be unique")
        if tuple(words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with the special tokens {SPECIAL_TOKENS}")
        self.words: List[str] = list(words)
        self.ids: Dict[str, int] = {w: i for i, w in enumerate(self.words)}
        self.num_classes = num_classes
        self.class_offset = len(self.words) - num_classes

    @classmethod
    def build(cls, num_classes: int) -> "Vocabulary":
        class_words = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"shape{i}" for i in range(num_classes)]
        return cls(list(SPECIAL_TOKENS) + list(FUNCTION_WORDS) + list(RELATION_WORDS) + class_words, num_classes)

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise ContractError(f"'{word}' is not in the vocabulary")

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self[w] for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for token in ids:
            if not 0 <= int(token) < len(self.words):
                raise TokenIndexError(f"token id {int(token)} is outside the vocabulary of {len(self.words)} words")
            out.append(self.words[int(token)])
        return out

    def class_word(self, class_id: int) -> str:
        return self.words[self.class_offset + int(class_id)]

    def class_token(self, class_id: int) -> int:
        return self.class_offset + int(class_id)

    def token_class(self, token: int) -> int:
        """Class id a class-word token names, or -1 for any other token."""
        offset = int(token) - self.class_offset
        return offset if 0 <= offset < self.num_classes else -1

    def word_ids(self) -> np.ndarray:
        """Ids of every non-special word, the pool random-word replacement draws from."""
        return np.arange(len(SPECIAL_TOKENS), len(self.words), dtype=np.int64)
