"""Token vocabulary shared by the generator, the model and checkpoints."""

from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Sequence

from .synthgui import INSTRUCTION_WORDS

SPECIALS = ("<pad>", "<bos>", "<eos>")
SYMBOLS = tuple("0123456789") + ("(", ")", ",")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad(self) -> int:
        return self.ids["<pad>"]

    @property
    def bos(self) -> int:
        return self.ids["<bos>"]

    @property
    def eos(self) -> int:
        return self.ids["<eos>"]

    def encode(self, words: Iterable[str]) -> list[int]:
        out = []
        for w in words:
            if w not in self.ids:
                raise KeyError(f"unknown token {w!r}")
            out.append(self.ids[w])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def encode_chars(self, text: str) -> list[int]:
        """Coordinate strings are tokenized one character per token."""
        return self.encode(list(text))


@lru_cache(maxsize=None)
def default_vocabulary() -> Vocabulary:
    return Vocabulary(SPECIALS + SYMBOLS + INSTRUCTION_WORDS)
