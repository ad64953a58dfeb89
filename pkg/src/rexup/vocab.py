"""Vocabulary and word-embedding tables (GloVe-style text vectors optional)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParseError

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ContractError("vocabulary must start with the padding and unknown tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token.lower(), UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


def build_vocab(corpus: Iterable[str | Sequence[str]]) -> Vocabulary:
    """Reserved entries first, then every distinct lowercased token in sorted order."""
    seen: set[str] = set()
    for item in corpus:
        toks = tokenize(item) if isinstance(item, str) else [t.lower() for t in item]
        seen.update(toks)
    seen -= {PAD, UNK}
    return Vocabulary([PAD, UNK, *sorted(seen)])


@dataclass
class EmbeddingTable:
    matrix: np.ndarray
    trainable: bool = True

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def row(self, vocab: Vocabulary, token: str) -> np.ndarray:
        return self.matrix[vocab.lookup(token)]


def read_text_vectors(path, width: int) -> dict[str, np.ndarray]:
    """Parse ``token v1 ... v_width`` lines."""
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) - 1 != width:
                raise DimensionError(f"line {lineno}: expected {width} values, found {len(parts) - 1}")
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError("non-numeric vector component", lineno) from None
            out[parts[0].lower()] = vec
    return out


def load_or_init_embeddings(
    vocab: Vocabulary,
    width: int,
    source: str | Path | None = None,
    seed: int = 0,
    scale: float = 0.5,
    trainable: bool = True,
) -> EmbeddingTable:
    if width < 1:
        raise ContractError("embedding width must be >= 1")
    rng = np.random.default_rng(seed)
    mat = rng.normal(0.0, scale, size=(len(vocab), width))
    if source is not None:
        for tok, vec in read_text_vectors(source, width).items():
            if tok in vocab.index:
                mat[vocab.index[tok]] = vec
    mat[PAD_ID] = 0.0
    return EmbeddingTable(mat, trainable)
