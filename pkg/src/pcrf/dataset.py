"""JSONL typing corpora and the type vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass


def phrase_words(phrase: str) -> list[str]:
    """Split a type phrase into words; underscores and slashes both separate.

    Hierarchical labels like "/person/artist" therefore yield the same kind
    of word list as flat labels like "living_thing".
    """
    words = [w for w in phrase.replace("/", "_").split("_") if w]
    if not words:
        raise ValueError(f"type phrase {phrase!r} contains no words")
    return words


class TypeVocabulary:
    """Immutable phrase <-> id mapping; ids are positions in `phrases`."""

    def __init__(self, phrases):
        self.phrases = list(phrases)
        self.index = {}
        for i, p in enumerate(self.phrases):
            phrase_words(p)  # reject phrases that carry no words
            if p in self.index:
                raise ValueError(f"duplicate type phrase {p!r}")
            self.index[p] = i

    def __len__(self):
        return len(self.phrases)

    def __contains__(self, phrase):
        return phrase in self.index

    def __eq__(self, other):
        return isinstance(other, TypeVocabulary) and self.phrases == other.phrases

    def id(self, phrase: str) -> int:
        try:
            return self.index[phrase]
        except KeyError:
            raise KeyError(f"unknown type {phrase!r}") from None

    def phrase(self, type_id: int) -> str:
        return self.phrases[type_id]


@dataclass
class TypingInstance:
    mention: str
    left_context: list[str]
    right_context: list[str]
    gold: set[int]


@dataclass
class DatasetStats:
    instance_count: int
    type_count: int
    avg_gold_size: float
    empty_gold_count: int


_FIELDS = ("mention_span", "left_context_token", "right_context_token", "y_str")


def load_jsonl(path, vocab: TypeVocabulary | None = None, type_list=None):
    """Read typing instances from a JSONL file.

    Each line holds mention_span (string), left_context_token and
    right_context_token (token lists), and y_str (gold type phrases).

    With `vocab` supplied the mapping is fixed and unknown labels raise.
    Otherwise the vocabulary is built here: phrases from `type_list` first,
    keeping their file order, then any remaining data labels appended in
    lexicographic order.

    Instances with empty gold sets are kept; downstream training skips them
    while prediction still covers them.

    Returns (instances, vocab).
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}: line {lineno}: {err.msg}") from None
            for key in _FIELDS:
                if key not in obj:
                    raise ValueError(f"{path}: line {lineno}: missing field {key!r}")
            rows.append((lineno, obj))

    if vocab is None:
        seen = {label for _, obj in rows for label in obj["y_str"]}
        listed = list(type_list) if type_list is not None else []
        vocab = TypeVocabulary(listed + sorted(seen - set(listed)))

    instances = []
    for lineno, obj in rows:
        gold = set()
        for label in obj["y_str"]:
            if label not in vocab:
                raise ValueError(
                    f"{path}: line {lineno}: unknown type {label!r} "
                    f"not in the fixed vocabulary")
            gold.add(vocab.id(label))
        instances.append(TypingInstance(
            mention=obj["mention_span"],
            left_context=list(obj["left_context_token"]),
            right_context=list(obj["right_context_token"]),
            gold=gold,
        ))
    return instances, vocab


def save_jsonl(instances, vocab: TypeVocabulary, path):
    """Inverse of load_jsonl; gold phrases are written in id order."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({
                "mention_span": inst.mention,
                "left_context_token": inst.left_context,
                "right_context_token": inst.right_context,
                "y_str": [vocab.phrase(i) for i in sorted(inst.gold)],
            }) + "\n")


def load_type_list(path) -> list[str]:
    """One phrase per line; file order becomes id order."""
    with open(path, encoding="utf-8") as fh:
        phrases = [line.strip() for line in fh if line.strip()]
    if not phrases:
        raise ValueError(f"{path}: empty type list")
    return phrases


def compute_stats(instances, vocab: TypeVocabulary) -> DatasetStats:
    sizes = [len(inst.gold) for inst in instances]
    avg = sum(sizes) / len(sizes) if sizes else 0.0
    return DatasetStats(
        instance_count=len(instances),
        type_count=len(vocab),
        avg_gold_size=avg,
        empty_gold_count=sum(1 for s in sizes if s == 0),
    )


def filter_granularity(instances, vocab: TypeVocabulary, keep):
    """Restrict the corpus to the type ids in `keep`.

    Kept types stay in their original relative order and are remapped to
    dense ids; gold sets are intersected, which may leave them empty.
    """
    keep = set(keep)
    kept_ids = [i for i in range(len(vocab)) if i in keep]
    if not kept_ids:
        raise ValueError("keep set is disjoint from the vocabulary")
    remap = {old: new for new, old in enumerate(kept_ids)}
    new_vocab = TypeVocabulary([vocab.phrase(i) for i in kept_ids])
    new_instances = [
        TypingInstance(
            mention=inst.mention,
            left_context=list(inst.left_context),
            right_context=list(inst.right_context),
            gold={remap[g] for g in inst.gold if g in keep},
        )
        for inst in instances
    ]
    return new_instances, new_vocab
