"""Synthetic correlated typing benchmark with a known implication structure.

Types form implication chains (an active node turns on all its ancestors),
mutual-exclusion groups (at most one member active per instance), and free
types.  Unary evidence is noisy on purpose: every type gets Gaussian
background noise, gold types sometimes lose their +m evidence, sometimes a
whole chain at once, and a few random non-gold types get -m counter
evidence.  Thresholding the raw unary scores therefore over-predicts
badly, and only the label correlations can clean the decode up, which is
exactly the regime the pairwise head is meant for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataset import TypeVocabulary, TypingInstance
from .seeding import substream

DEFAULT_CHAINS = 12
DEFAULT_CHAIN_DEPTH = 3
DEFAULT_GROUPS = 4
DEFAULT_GROUP_SIZE = 5
DEFAULT_FREE_TYPES = 8          # 12*3 + 4*5 + 8 = 64 types
DEFAULT_EVIDENCE = 2.0
DEFAULT_LABEL_DROPOUT = 0.1     # per-label chance of losing its evidence
DEFAULT_CHAIN_DROPOUT = 0.25    # chance the whole chain loses its evidence
DEFAULT_NOISE = 1.0
DEFAULT_DISTRACTORS = 3
DEFAULT_GROUP_RATE = 0.5
DEFAULT_FREE_RATE = 0.05
DEFAULT_TRAIN_SIZE = 512
DEFAULT_DEV_SIZE = 128
DEFAULT_TEST_SIZE = 256


@dataclass
class SynthConfig:
    chains: int = DEFAULT_CHAINS
    chain_depth: int = DEFAULT_CHAIN_DEPTH
    groups: int = DEFAULT_GROUPS
    group_size: int = DEFAULT_GROUP_SIZE
    free_types: int = DEFAULT_FREE_TYPES
    evidence: float = DEFAULT_EVIDENCE
    label_dropout: float = DEFAULT_LABEL_DROPOUT
    chain_dropout: float = DEFAULT_CHAIN_DROPOUT
    noise: float = DEFAULT_NOISE
    distractors: int = DEFAULT_DISTRACTORS
    group_rate: float = DEFAULT_GROUP_RATE
    free_rate: float = DEFAULT_FREE_RATE
    train_size: int = DEFAULT_TRAIN_SIZE
    dev_size: int = DEFAULT_DEV_SIZE
    test_size: int = DEFAULT_TEST_SIZE
    seed: int = 0


@dataclass
class Schema:
    vocab: TypeVocabulary
    parents: dict            # child id -> parent id, chain edges only
    chains: list             # per chain, ids from root to leaf
    groups: list             # per group, member ids
    free: list

    def ancestors(self, type_id: int) -> set:
        out = set()
        while type_id in self.parents:
            type_id = self.parents[type_id]
            out.add(type_id)
        return out


def build_schema(cfg: SynthConfig) -> Schema:
    names = []
    chains = []
    parents = {}
    for ci in range(cfg.chains):
        chain = []
        for li in range(cfg.chain_depth):
            idx = len(names)
            names.append(f"c{ci:02d}_l{li}")
            if li > 0:
                parents[idx] = chain[-1]
            chain.append(idx)
        chains.append(chain)
    groups = []
    for gi in range(cfg.groups):
        group = []
        for mi in range(cfg.group_size):
            group.append(len(names))
            names.append(f"g{gi}_m{mi}")
        groups.append(group)
    free = []
    for fi in range(cfg.free_types):
        free.append(len(names))
        names.append(f"free_{fi:02d}")
    return Schema(TypeVocabulary(names), parents, chains, groups, free)


def sample_split(schema: Schema, cfg: SynthConfig, rng, count: int):
    """(instances, theta1 matrix) for one split.

    Gold sets are closed under chain ancestors by construction.
    """
    n = len(schema.vocab)
    instances = []
    theta = np.empty((count, n))
    for i in range(count):
        ci = int(rng.integers(cfg.chains))
        level = int(rng.integers(cfg.chain_depth))
        node = schema.chains[ci][level]
        gold = {node} | schema.ancestors(node)
        chain_ids = set(schema.chains[ci])
        if rng.random() < cfg.group_rate:
            gi = int(rng.integers(cfg.groups))
            gold.add(schema.groups[gi][int(rng.integers(cfg.group_size))])
        for fi in schema.free:
            if rng.random() < cfg.free_rate:
                gold.add(fi)

        row = rng.normal(0.0, cfg.noise, size=n)
        drop_chain = rng.random() < cfg.chain_dropout
        for t in sorted(gold):
            dropped = (drop_chain and t in chain_ids) or rng.random() < cfg.label_dropout
            if not dropped:
                row[t] += cfg.evidence
        negatives = np.array(sorted(set(range(n)) - gold))
        for t in rng.choice(negatives, size=min(cfg.distractors, negatives.size),
                            replace=False):
            row[t] -= cfg.evidence
        theta[i] = row

        mention = schema.vocab.phrase(node).replace("_", " ")
        instances.append(TypingInstance(
            mention=mention,
            left_context=["the"],
            right_context=["sample"],
            gold=gold,
        ))
    return instances, theta


def write_benchmark(out_dir, cfg: SynthConfig) -> dict:
    """Write train/dev/test JSONL, matching logits files, the type list, and
    the generating structure.  Output bytes depend only on the config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = substream(cfg.seed, "synth")
    schema = build_schema(cfg)
    paths = {"types": str(out / "types.txt"), "schema": str(out / "schema.json")}

    with open(paths["types"], "w", encoding="utf-8") as fh:
        for phrase in schema.vocab.phrases:
            fh.write(phrase + "\n")
    with open(paths["schema"], "w", encoding="utf-8") as fh:
        json.dump({
            "names": schema.vocab.phrases,
            "parents": {str(k): v for k, v in schema.parents.items()},
            "chains": schema.chains,
            "groups": schema.groups,
            "free": schema.free,
            "config": asdict(cfg),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for split, count in (("train", cfg.train_size), ("dev", cfg.dev_size),
                         ("test", cfg.test_size)):
        instances, theta = sample_split(schema, cfg, rng, count)
        data_path = out / f"{split}.jsonl"
        logits_path = out / f"{split}_logits.jsonl"
        with open(data_path, "w", encoding="utf-8") as fh:
            for inst in instances:
                fh.write(json.dumps({
                    "mention_span": inst.mention,
                    "left_context_token": inst.left_context,
                    "right_context_token": inst.right_context,
                    "y_str": [schema.vocab.phrase(t) for t in sorted(inst.gold)],
                }) + "\n")
        with open(logits_path, "w", encoding="utf-8") as fh:
            for i in range(count):
                fh.write(json.dumps({"id": i, "theta1": theta[i].tolist()}) + "\n")
        paths[split] = str(data_path)
        paths[f"{split}_logits"] = str(logits_path)
    return paths
