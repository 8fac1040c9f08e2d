"""Command-line interface: train, eval, predict, inspect, bench, synth.

Configuration precedence is flag > config file > built-in default.  The
config file is plain "key = value" lines with # comments; keys are the
RunConfig field names.  Whatever configuration a command ends up running
with is dumped as JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import synth as synth_mod
from .dataset import compute_stats, load_jsonl, load_type_list
from .embeddings import embed_types, load_word_vectors, random_type_embeddings
from .metrics import format_iteration_table
from .potentials import compute_factors, recover_submatrices
from .seeding import substream
from .training import (RunConfig, build_model, evaluate_split, load_checkpoint,
                       predict_split, prepare_split, save_checkpoint, train)
from .unary import LogitsFile

# Explicit coercers for config-file values, keyed by RunConfig field.
_CONFIG_COERCERS = {
    "rank": int, "iterations": int, "window": int, "batch_size": int,
    "epochs": int, "patience": int, "embedding_dim": int, "seed": int,
    "dropout": float, "step_size": float, "threshold": float, "alpha": float,
    "lr": float, "weight_decay": float, "beta1": float, "beta2": float,
    "adam_eps": float,
    "force_nonempty": "bool", "exclude_self": "bool", "random_embeddings": "bool",
    "ffn_variant": str, "unary": str, "precision": str,
    "hidden": "opt_int",
}


def _coerce(path, lineno, key, raw):
    kind = _CONFIG_COERCERS[key]
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "opt_int":
            return None if raw.lower() == "none" else int(raw)
        return kind(raw)
    except ValueError:
        raise ValueError(f"{path}: line {lineno}: bad value {raw!r} for {key}") from None


def parse_config_file(path) -> dict:
    """key = value lines; unknown keys are rejected rather than ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_COERCERS:
                raise ValueError(f"{path}: line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(path, lineno, key, raw)
    return values


def effective_config(args) -> RunConfig:
    """Fold defaults, config file, and explicit flags, in that order."""
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


def _add_config_options(p):
    g = p.add_argument_group(
        "run configuration", "defaults live in RunConfig; flags override --config")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--rank", type=int)
    g.add_argument("--hidden", type=int, help="FFN hidden width; defaults to the embedding dim")
    g.add_argument("--dropout", type=float)
    g.add_argument("--ffn-variant", dest="ffn_variant", choices=["tanh", "linear", "identity"])
    g.add_argument("--iterations", type=int)
    g.add_argument("--step-size", dest="step_size", type=float)
    g.add_argument("--threshold", type=float)
    g.add_argument("--force-nonempty", dest="force_nonempty",
                   action=argparse.BooleanOptionalAction)
    g.add_argument("--exclude-self", dest="exclude_self",
                   action=argparse.BooleanOptionalAction,
                   help="drop each type's own diagonal term from the update field")
    g.add_argument("--unary", choices=["file", "bag"])
    g.add_argument("--window", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--adam-eps", dest="adam_eps", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--precision", choices=["single", "double"])
    g.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    g.add_argument("--random-embeddings", dest="random_embeddings",
                   action=argparse.BooleanOptionalAction)
    g.add_argument("--seed", type=int)


def _dump_config(out_dir, command, config, paths):
    payload = {"command": command, "paths": paths, "config": config}
    path = Path(out_dir) / "config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = effective_config(args)
    if args.no_pcrf:
        cfg = replace(cfg, iterations=0)
    if args.linear_ffn:
        cfg = replace(cfg, ffn_variant="linear")
    if args.no_ffn:
        cfg = replace(cfg, ffn_variant="identity")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    type_list = load_type_list(args.type_list) if args.type_list else None
    train_insts, vocab = load_jsonl(args.train, type_list=type_list)
    dev_insts, _ = load_jsonl(args.dev, vocab=vocab)
    for name, insts in (("train", train_insts), ("dev", dev_insts)):
        s = compute_stats(insts, vocab)
        print(f"{name}: {s.instance_count} instances, {s.type_count} types, "
              f"avg gold {s.avg_gold_size:.2f}, empty gold {s.empty_gold_count}")

    rng_init = substream(cfg.seed, "init")
    table = None
    if cfg.random_embeddings:
        e = random_type_embeddings(len(vocab), cfg.embedding_dim, rng_init)
    else:
        if not args.word_vectors:
            raise ValueError("--word-vectors is required unless --random-embeddings is set")
        table = load_word_vectors(args.word_vectors)
        e = embed_types(vocab, table, rng_init).matrix
    if cfg.ffn_variant == "identity" and cfg.rank != e.shape[1]:
        print(f"identity factor map: forcing rank to the embedding dim {e.shape[1]}")
        cfg = replace(cfg, rank=e.shape[1])

    if cfg.unary == "file":
        if not args.logits or not args.dev_logits:
            raise ValueError("unary=file needs --logits and --dev-logits")
        train_split = prepare_split(train_insts, vocab,
                                    logits=LogitsFile.load(args.logits, len(vocab)))
        dev_split = prepare_split(dev_insts, vocab,
                                  logits=LogitsFile.load(args.dev_logits, len(vocab)))
    else:
        if table is None:
            if not args.word_vectors:
                raise ValueError("unary=bag needs --word-vectors")
            table = load_word_vectors(args.word_vectors)
        train_split = prepare_split(train_insts, vocab, table=table, window=cfg.window)
        dev_split = prepare_split(dev_insts, vocab, table=table, window=cfg.window)

    model = build_model(vocab, cfg, e, rng_init)
    history = train(model, train_split, dev_split)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model)
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    _dump_config(out, "train", asdict(cfg), {
        "train": args.train, "dev": args.dev, "type_list": args.type_list,
        "word_vectors": args.word_vectors, "logits": args.logits,
        "dev_logits": args.dev_logits, "out": str(out),
    })
    best_epoch = history[-1]["best_epoch"]
    best_f1 = max(row["dev_macro_f1"] for row in history)
    kind = "unary-only baseline (0 iterations)" if cfg.iterations == 0 else \
        f"{cfg.iterations}-iteration pairwise head"
    print(f"trained {kind} for {len(history)} epochs; "
          f"best epoch {best_epoch}, dev macro-F1 {best_f1:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_eval_split(args, model):
    insts, _ = load_jsonl(args.data, vocab=model.vocab)
    if model.config.unary == "file" or args.logits:
        if not args.logits:
            raise ValueError("this checkpoint scores from logits files; pass --logits")
        return insts, prepare_split(insts, model.vocab,
                                    logits=LogitsFile.load(args.logits, len(model.vocab)))
    if not args.word_vectors:
        raise ValueError("this checkpoint uses the bag scorer; pass --word-vectors")
    table = load_word_vectors(args.word_vectors)
    return insts, prepare_split(insts, model.vocab, table=table, window=model.config.window)


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    _, split = _load_eval_split(args, model)
    report, rows = evaluate_split(model, split, iterations=args.iterations,
                                  threshold=args.threshold,
                                  force_nonempty=args.force_nonempty)
    print(report.format_text())
    print(format_iteration_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
        (out / "iterations.json").write_text(
            json.dumps([r.to_dict() for r in rows], indent=2) + "\n", encoding="utf-8")
        cfg = asdict(model.config)
        if args.iterations is not None:
            cfg["iterations"] = args.iterations
        if args.threshold is not None:
            cfg["threshold"] = args.threshold
        if args.force_nonempty is not None:
            cfg["force_nonempty"] = args.force_nonempty
        _dump_config(out, "eval", cfg, {"checkpoint": args.checkpoint,
                                        "data": args.data, "logits": args.logits,
                                        "word_vectors": args.word_vectors})
    return 0


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    insts, split = _load_eval_split(args, model)
    preds = predict_split(model, split, threshold=args.threshold,
                          force_nonempty=args.force_nonempty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.jsonl"
    with open(pred_path, "w", encoding="utf-8") as fh:
        for i, (inst, pred) in enumerate(zip(insts, preds)):
            fh.write(json.dumps({
                "id": i,
                "mention_span": inst.mention,
                "types": [model.vocab.phrase(t) for t in sorted(pred)],
            }) + "\n")
    _dump_config(out, "predict", asdict(model.config),
                 {"checkpoint": args.checkpoint, "data": args.data,
                  "logits": args.logits, "word_vectors": args.word_vectors})
    print(f"wrote {len(preds)} predictions to {pred_path}")
    return 0


def cmd_inspect(args):
    model = load_checkpoint(args.checkpoint)
    ids = []
    for name in args.types:
        if name not in model.vocab:
            close = difflib.get_close_matches(name, model.vocab.phrases, n=3)
            hint = f"; closest matches: {', '.join(close)}" if close else ""
            raise ValueError(f"unknown type {name!r}{hint}")
        i = model.vocab.id(name)
        if i in ids:
            print(f"warning: duplicate type {name!r} ignored", file=sys.stderr)
            continue
        ids.append(i)
    e0, e1 = compute_factors(model.e, model.ffn0, model.ffn1)
    t00, t11, t01, t10 = recover_submatrices(e0, e1, ids)
    names = [model.vocab.phrase(i) for i in ids]
    print(f"recovered 4 x {len(ids)} x {len(ids)} potential blocks")
    print(f"max |theta00 - theta00^T| = {np.max(np.abs(t00 - t00.T)):.3e}")
    print(f"max |theta11 - theta11^T| = {np.max(np.abs(t11 - t11.T)):.3e}")
    print(f"max |theta01 - theta10^T| = {np.max(np.abs(t01 - t10.T)):.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "potentials.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["matrix", "row_type", "col_type", "value"])
            for label, mat in (("theta00", t00), ("theta11", t11),
                               ("theta01", t01), ("theta10", t10)):
                for a, row_name in enumerate(names):
                    for b, col_name in enumerate(names):
                        writer.writerow([label, row_name, col_name, repr(mat[a, b])])
        _dump_config(out, "inspect", asdict(model.config),
                     {"checkpoint": args.checkpoint, "types": names})
        print(f"wrote {csv_path}")
    return 0


def cmd_bench(args):
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = bench_mod.run_bench(sizes=sizes, rank=args.rank, repeats=args.repeats,
                               threads=args.threads, seed=args.seed)
    print(bench_mod.format_bench_table(rows))
    worst = max((r["ratio_vs_prev"] or 0.0) for r in rows)
    print(f"worst ratio per doubling: {worst:.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        _dump_config(out, "bench", {"sizes": list(sizes), "rank": args.rank,
                                    "repeats": args.repeats, "threads": args.threads,
                                    "seed": args.seed}, {})
    return 0


def cmd_synth(args):
    values = {f.name: getattr(args, f.name) for f in fields(synth_mod.SynthConfig)
              if getattr(args, f.name, None) is not None}
    scfg = synth_mod.SynthConfig(**values)
    paths = synth_mod.write_benchmark(args.out, scfg)
    schema = synth_mod.build_schema(scfg)
    _dump_config(args.out, "synth", asdict(scfg), paths)
    print(f"wrote {len(schema.vocab)}-type benchmark "
          f"({scfg.train_size}/{scfg.dev_size}/{scfg.test_size} instances) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="pcrf",
        description="pairwise CRF head for multi-label typing")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--train", required=True, help="training split JSONL")
    t.add_argument("--dev", required=True, help="dev split JSONL")
    t.add_argument("--type-list", dest="type_list", help="type phrases, one per line")
    t.add_argument("--word-vectors", dest="word_vectors")
    t.add_argument("--logits", help="precomputed unary scores for --train")
    t.add_argument("--dev-logits", dest="dev_logits")
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int)
    t.add_argument("--no-pcrf", action="store_true",
                   help="ablation: unary-only baseline, zero update iterations")
    t.add_argument("--linear-ffn", action="store_true",
                   help="ablation: single linear factor maps, no hidden layer")
    t.add_argument("--no-ffn", action="store_true",
                   help="ablation: embeddings used directly as factors")
    _add_config_options(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--logits")
    e.add_argument("--word-vectors", dest="word_vectors")
    e.add_argument("--out")
    e.add_argument("--threads", type=int)
    e.add_argument("--iterations", type=int, help="override the trained iteration count")
    e.add_argument("--threshold", type=float)
    e.add_argument("--force-nonempty", dest="force_nonempty",
                   action=argparse.BooleanOptionalAction)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write decoded type sets for a split")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--logits")
    pr.add_argument("--word-vectors", dest="word_vectors")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threads", type=int)
    pr.add_argument("--threshold", type=float)
    pr.add_argument("--force-nonempty", dest="force_nonempty",
                    action=argparse.BooleanOptionalAction)
    pr.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="recover pairwise potentials for named types")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--types", nargs="+", required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time the field update across sizes")
    b.add_argument("--sizes", default=",".join(str(s) for s in bench_mod.DEFAULT_SIZES))
    b.add_argument("--rank", type=int, default=bench_mod.DEFAULT_BENCH_RANK)
    b.add_argument("--repeats", type=int, default=bench_mod.DEFAULT_REPEATS)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate the correlated synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--chains", type=int)
    s.add_argument("--chain-depth", dest="chain_depth", type=int)
    s.add_argument("--groups", type=int)
    s.add_argument("--group-size", dest="group_size", type=int)
    s.add_argument("--free-types", dest="free_types", type=int)
    s.add_argument("--evidence", type=float)
    s.add_argument("--label-dropout", dest="label_dropout", type=float)
    s.add_argument("--chain-dropout", dest="chain_dropout", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--distractors", type=int)
    s.add_argument("--group-rate", dest="group_rate", type=float)
    s.add_argument("--free-rate", dest="free_rate", type=float)
    s.add_argument("--train-size", dest="train_size", type=int)
    s.add_argument("--dev-size", dest="dev_size", type=int)
    s.add_argument("--test-size", dest="test_size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    try:
        if threads and args.func is not cmd_bench:   # bench pins threads itself
            with threadpool_limits(limits=threads):
                return args.func(args) or 0
        return args.func(args) or 0
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
