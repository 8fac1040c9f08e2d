"""Word vector tables and type-phrase embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import TypeVocabulary, phrase_words

logger = logging.getLogger(__name__)

DEFAULT_DIM = 300
FALLBACK_STD = 0.02


class WordVectorTable:
    """token -> vector lookup with a lowercase fallback."""

    def __init__(self, vectors: dict, dim: int):
        self.vectors = vectors
        self.dim = dim

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, word):
        return word in self.vectors or word.lower() in self.vectors

    def lookup(self, word: str):
        """Vector for `word`, trying the verbatim form then lowercase; None if absent."""
        v = self.vectors.get(word)
        if v is None:
            v = self.vectors.get(word.lower())
        return v


def load_word_vectors(path) -> WordVectorTable:
    """Parse whitespace-separated text vectors.

    Every line is a token followed by its vector values; the first line
    fixes the dimension and later lines must match it.
    """
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise ValueError(f"{path}: line {lineno}: no vector values")
            elif len(values) != dim:
                raise ValueError(
                    f"{path}: line {lineno}: expected {dim} values, got {len(values)}")
            vectors[token] = np.array(values, dtype=np.float64)
    if not vectors:
        raise ValueError(f"{path}: empty word vector file")
    return WordVectorTable(vectors, dim)


@dataclass
class TypeEmbeddingMatrix:
    matrix: np.ndarray        # (N, D)
    fallback_ids: list[int]   # types whose words were all out of vocabulary


def embed_types(vocab: TypeVocabulary, table: WordVectorTable, rng=None) -> TypeEmbeddingMatrix:
    """Mean word vector per type phrase.

    Types whose words are all missing from the table get a N(0, 0.02^2) row,
    so they start near zero but are not tied together; the count of such
    types is logged as a warning.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    rows = np.empty((len(vocab), table.dim))
    fallback_ids = []
    for i, phrase in enumerate(vocab.phrases):
        found = [v for v in (table.lookup(w) for w in phrase_words(phrase)) if v is not None]
        if found:
            rows[i] = np.mean(found, axis=0)
        else:
            rows[i] = rng.normal(0.0, FALLBACK_STD, size=table.dim)
            fallback_ids.append(i)
    if fallback_ids:
        logger.warning("%d of %d type phrases had no words in the vector table",
                       len(fallback_ids), len(vocab))
    return TypeEmbeddingMatrix(rows, fallback_ids)


def random_type_embeddings(n_types: int, dim: int = DEFAULT_DIM, rng=None) -> np.ndarray:
    """Train-from-scratch initialization, N(0, 0.02^2)."""
    if rng is None:
        rng = np.random.default_rng(0)
    return rng.normal(0.0, FALLBACK_STD, size=(n_types, dim))
