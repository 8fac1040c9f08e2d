"""Per-type unary scores, from precomputed logits or a context-bag encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import TypingInstance
from .embeddings import WordVectorTable

DEFAULT_WINDOW = 10


@dataclass
class UnaryScores:
    """theta1 scores the "type on" state; theta0 is pinned at zero.

    theta0 is kept explicit because the update equations read both sides;
    pinning it keeps the unary part identifiable.
    """

    theta1: np.ndarray
    theta0: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=np.float64) \
            if not isinstance(self.theta1, np.ndarray) else self.theta1
        if self.theta0 is None:
            self.theta0 = np.zeros_like(self.theta1)


class LogitsFile:
    """Precomputed unary scores, one JSONL row {"id": ..., "theta1": [...]} each.

    Instances carry no id of their own, so the id convention is the 0-based
    position of the instance within its split file.
    """

    def __init__(self, entries: dict, n_types: int):
        self.entries = entries
        self.n_types = n_types

    @classmethod
    def load(cls, path, n_types: int | None = None) -> "LogitsFile":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as err:
                    raise ValueError(f"{path}: line {lineno}: {err.msg}") from None
                theta1 = np.asarray(obj["theta1"], dtype=np.float64)
                if n_types is None:
                    n_types = theta1.shape[0]
                if theta1.shape != (n_types,):
                    raise ValueError(
                        f"{path}: line {lineno}: theta1 has length "
                        f"{theta1.shape[0]}, expected {n_types}")
                entries[int(obj["id"])] = theta1
        if n_types is None:
            raise ValueError(f"{path}: empty logits file")
        return cls(entries, n_types)

    def scores_for(self, instance_id: int) -> UnaryScores:
        if instance_id not in self.entries:
            raise KeyError(f"no unary scores for instance id {instance_id}")
        return UnaryScores(theta1=self.entries[instance_id])


@dataclass
class BagEncoderParams:
    """Linear scorer over a mean-pooled word bag: theta1 = projection @ h + bias."""

    table: WordVectorTable
    projection: np.ndarray   # (N, D)
    bias: np.ndarray         # (N,)
    window: int = DEFAULT_WINDOW


def context_bag_vector(instance: TypingInstance, table: WordVectorTable,
                       window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Feature vector h for one instance.

    h is the mean vector of the mention words plus the mean vector of the
    context bag, where the bag holds up to `window` words adjacent to the
    mention on each side.  Words missing from the table are skipped and an
    empty pool contributes a zero vector, so h is always defined.
    """
    mention_vecs = [v for v in (table.lookup(w) for w in instance.mention.split())
                    if v is not None]
    context_words = instance.left_context[-window:] if window else []
    context_words = context_words + (instance.right_context[:window] if window else [])
    context_vecs = [v for v in (table.lookup(w) for w in context_words) if v is not None]
    h = np.zeros(table.dim)
    if mention_vecs:
        h += np.mean(mention_vecs, axis=0)
    if context_vecs:
        h += np.mean(context_vecs, axis=0)
    return h


def bag_encode(instance: TypingInstance, params: BagEncoderParams) -> UnaryScores:
    """Unary scores for one instance from its mean-pooled word bag."""
    h = context_bag_vector(instance, params.table, params.window)
    return UnaryScores(theta1=params.projection @ h + params.bias)
