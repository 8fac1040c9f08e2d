"""Loss, optimizer, unrolled forward/backward, the loop, and checkpoints."""

import json
import math
import struct

import numpy as np
import pytest

import pcrf.mfvi as mfvi
from pcrf import training
from pcrf.dataset import TypingInstance
from pcrf.training import (AdamW, Model, RunConfig, backward_batch, bce_loss,
                           bce_loss_grad, build_model, evaluate_split,
                           forward_batch, load_checkpoint, make_dropout_masks,
                           predict_split, prepare_split, save_checkpoint,
                           split_theta1, train)
from pcrf.unary import LogitsFile, UnaryScores

from conftest import (SYNTH_RUN, finite_difference, relative_error, synth_task,
                      toy_model, toy_vocab)

# ---------------------------------------------------------------------------
# loss


def test_bce_frozen():
    q = np.array([[0.8, 0.3]])
    gold = np.array([[1.0, 0.0]])
    assert bce_loss(q, gold, alpha=2.0) == pytest.approx(0.4014810232835759, abs=1e-15)
    g = bce_loss_grad(q, gold, alpha=2.0)
    assert g[0, 0] == pytest.approx(-1.25, abs=1e-12)
    assert g[0, 1] == pytest.approx(0.7142857142857143, abs=1e-12)


def test_bce_alpha_weights_positives_only():
    q = np.array([[0.8]])
    on = np.array([[1.0]])
    off = np.array([[0.0]])
    assert bce_loss(q, on, alpha=2.0) == pytest.approx(2.0 * bce_loss(q, on, alpha=1.0))
    assert bce_loss(q, off, alpha=2.0) == pytest.approx(bce_loss(q, off, alpha=1.0))


def test_bce_clamp_keeps_loss_finite_and_grad_zero():
    q = np.array([[0.0, 1.0]])
    gold = np.array([[1.0, 0.0]])
    loss = bce_loss(q, gold)
    assert math.isfinite(loss) and loss > 10.0
    np.testing.assert_array_equal(bce_loss_grad(q, gold), [[0.0, 0.0]])


def test_bce_batch_mean_equals_mean_of_rows(rng):
    q = rng.random((6, 5))
    gold = (rng.random((6, 5)) < 0.3).astype(float)
    per_row = [bce_loss(q[i:i + 1], gold[i:i + 1]) for i in range(6)]
    assert bce_loss(q, gold) == pytest.approx(float(np.mean(per_row)), abs=1e-12)


def test_bce_grad_matches_finite_differences(rng):
    q = np.clip(rng.random((3, 4)), 0.05, 0.95)
    gold = (rng.random((3, 4)) < 0.4).astype(float)
    fd = finite_difference(lambda: bce_loss(q, gold, alpha=2.0), [q], h=1e-6)[0]
    assert relative_error(bce_loss_grad(q, gold, alpha=2.0), fd) < 1e-7


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_first_step_frozen():
    p = {"w": np.zeros(3)}
    opt = AdamW(p, lr=1e-3, weight_decay=0.0)
    opt.step(p, {"w": np.ones(3)})
    np.testing.assert_allclose(p["w"], -0.0009999999900000003, rtol=1e-12)
    assert opt.step_count == 1


def test_adamw_decay_is_decoupled():
    p = {"w": np.ones(2)}
    opt = AdamW(p, lr=1.0, weight_decay=0.1)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_allclose(p["w"], 0.9, rtol=1e-15)
    np.testing.assert_array_equal(opt.m["w"], 0.0)
    np.testing.assert_array_equal(opt.v["w"], 0.0)


def test_adamw_matches_reference_steps(rng):
    # textbook reference, written independently of the class under test
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.02
    w_ref = rng.standard_normal((3, 2))
    params = {"w": w_ref.copy()}
    opt = AdamW(params, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    m = np.zeros_like(w_ref)
    v = np.zeros_like(w_ref)
    for t in range(1, 6):
        g = rng.standard_normal((3, 2))
        opt.step(params, {"w": g})
        w_ref = w_ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w_ref = w_ref - lr * mhat / (np.sqrt(vhat) + eps)
        np.testing.assert_allclose(params["w"], w_ref, atol=1e-14)


# ---------------------------------------------------------------------------
# unrolled forward


@pytest.mark.parametrize("exclude_self", [False, True])
def test_forward_batch_matches_per_instance_updates(exclude_self):
    model = toy_model(n=6, d=4, rank=3, iterations=4, exclude_self=exclude_self)
    rng = np.random.default_rng(42)
    theta1 = rng.standard_normal((3, 6))
    trajectory, cache = forward_batch(model, theta1)
    assert len(trajectory) == 5
    e0, e1 = cache["e0"], cache["e1"]
    for b in range(3):
        ref = mfvi.run(UnaryScores(theta1=theta1[b]), e0, e1,
                       iterations=4, step_size=model.config.step_size,
                       exclude_self=exclude_self)
        for t in range(5):
            np.testing.assert_allclose(trajectory[t][b], ref[t].q1, atol=1e-12)


def test_forward_batch_dropout_masks_replay():
    model = toy_model(n=5, d=4, rank=2, dropout=0.5, iterations=2)
    theta1 = np.random.default_rng(1).standard_normal((2, 5))
    masks = make_dropout_masks(model, np.random.default_rng(2))
    a, _ = forward_batch(model, theta1, masks=masks)
    b, _ = forward_batch(model, theta1, masks=masks)
    np.testing.assert_array_equal(a[-1], b[-1])
    clean, _ = forward_batch(model, theta1)
    assert not np.array_equal(a[-1], clean[-1])


# ---------------------------------------------------------------------------
# hand-written backward vs central differences


def model_loss(model, theta1, gold, masks):
    trajectory, _ = forward_batch(model, theta1, masks=masks)
    return bce_loss(trajectory[-1], gold, model.config.alpha)


@pytest.mark.parametrize("variant,exclude_self", [
    ("tanh", False), ("tanh", True), ("linear", False), ("identity", True),
])
def test_backward_matches_finite_differences(variant, exclude_self):
    rng = np.random.default_rng(9)
    n, d = 4, 3
    rank = d if variant == "identity" else 2
    model = toy_model(n=n, d=d, rank=rank, hidden=3 if variant == "tanh" else None,
                      iterations=2, ffn_variant=variant, exclude_self=exclude_self,
                      dropout=0.4 if variant == "tanh" else 0.0)
    theta1 = rng.standard_normal((2, n))
    gold = (rng.random((2, n)) < 0.4).astype(float)
    masks = make_dropout_masks(model, rng)

    trajectory, cache = forward_batch(model, theta1, masks=masks)
    dq1 = bce_loss_grad(trajectory[-1], gold, model.config.alpha)
    grads, gtheta1 = backward_batch(model, cache, dq1)

    params = model.parameters()
    names = sorted(params)
    fd = finite_difference(lambda: model_loss(model, theta1, gold, masks),
                           [params[k] for k in names] + [theta1])
    for name, numeric in zip(names, fd[:-1]):
        assert relative_error(grads[name], numeric) < 1e-6, name
    assert relative_error(gtheta1, fd[-1]) < 1e-6


def test_bag_unary_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    n, d = 4, 3
    model = toy_model(n=n, d=d, rank=2, iterations=2, unary="bag")
    h = rng.standard_normal((2, d))
    gold = (rng.random((2, n)) < 0.5).astype(float)

    def loss():
        theta1 = h @ model.projection.T + model.bias
        trajectory, _ = forward_batch(model, theta1)
        return bce_loss(trajectory[-1], gold, model.config.alpha)

    theta1 = h @ model.projection.T + model.bias
    trajectory, cache = forward_batch(model, theta1)
    dq1 = bce_loss_grad(trajectory[-1], gold, model.config.alpha)
    _, gtheta1 = backward_batch(model, cache, dq1)
    gproj = gtheta1.T @ h
    gbias = gtheta1.sum(axis=0)
    fd_proj, fd_bias = finite_difference(loss, [model.projection, model.bias])
    assert relative_error(gproj, fd_proj) < 1e-6
    assert relative_error(gbias, fd_bias) < 1e-6


# ---------------------------------------------------------------------------
# split preparation


def instances_for(golds, n):
    return [TypingInstance(mention=f"m{i}", left_context=[], right_context=[],
                           gold=set(g)) for i, g in enumerate(golds)]


def logits_from_matrix(theta):
    entries = {i: np.asarray(row, dtype=np.float64) for i, row in enumerate(theta)}
    return LogitsFile(entries, theta.shape[1])


def test_prepare_split_gold_and_trainable(rng):
    vocab = toy_vocab(3)
    insts = instances_for([{0, 2}, set(), {1}], 3)
    split = prepare_split(insts, vocab, logits=logits_from_matrix(rng.standard_normal((3, 3))))
    np.testing.assert_array_equal(split.gold, [[1, 0, 1], [0, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(split.trainable, [0, 2])


def test_prepare_split_validations(rng):
    vocab = toy_vocab(3)
    insts = instances_for([{0}], 3)
    with pytest.raises(ValueError, match="logits have 2 types, vocabulary has 3"):
        prepare_split(insts, vocab, logits=logits_from_matrix(rng.standard_normal((1, 2))))
    with pytest.raises(KeyError, match="instance id 1"):
        prepare_split(instances_for([{0}, {1}], 3), vocab,
                      logits=logits_from_matrix(rng.standard_normal((1, 3))))
    with pytest.raises(ValueError, match="either a logits file or a word vector"):
        prepare_split(insts, vocab)


def test_split_theta1_casts_to_model_dtype(rng):
    vocab = toy_vocab(3)
    theta = rng.standard_normal((2, 3))
    split = prepare_split(instances_for([{0}, {1}], 3), vocab,
                          logits=logits_from_matrix(theta))
    single = toy_model(n=3, d=2, rank=2, precision="single")
    assert split_theta1(single, split).dtype == np.float32
    out = split_theta1(single, split, ids=np.array([1]))
    np.testing.assert_allclose(out[0], theta[1], atol=1e-6)


# ---------------------------------------------------------------------------
# training loop


def make_tiny_task(seed=0, m=24, n=4):
    """Unary evidence that over-predicts; gold follows an implication 0->1."""
    rng = np.random.default_rng(seed)
    golds = []
    theta = np.empty((m, n))
    for i in range(m):
        g = {0, 1} if rng.random() < 0.5 else {1}
        golds.append(g)
        row = rng.normal(0.0, 1.0, n)
        for t in g:
            row[t] += 2.0
        theta[i] = row
    insts = instances_for(golds, n)
    return prepare_split(insts, toy_vocab(n), logits=logits_from_matrix(theta))


def test_train_returns_history_and_restores_best():
    split = make_tiny_task()
    dev = make_tiny_task(seed=1)
    model = toy_model(n=4, d=3, rank=2, iterations=2, epochs=4, patience=10,
                      batch_size=8, dropout=0.0)
    history = train(model, split, dev)
    assert [row["epoch"] for row in history] == list(range(len(history)))
    assert {"train_loss", "dev_macro_p", "dev_macro_r", "dev_macro_f1",
            "best_epoch"} <= set(history[0])
    best = history[-1]["best_epoch"]
    report, _ = evaluate_split(model, dev)
    assert report.macro_f1 == pytest.approx(history[best]["dev_macro_f1"], abs=1e-12)
    assert report.macro_f1 == pytest.approx(max(r["dev_macro_f1"] for r in history),
                                            abs=1e-12)


def test_train_early_stops_when_nothing_improves():
    split = make_tiny_task()
    model = toy_model(n=4, d=3, rank=2, iterations=1, epochs=50, patience=3,
                      batch_size=8, lr=0.0, weight_decay=0.0)
    history = train(model, split, split)
    assert len(history) == 4          # best at epoch 0, then patience epochs
    assert history[-1]["best_epoch"] == 0


def test_train_requires_nonempty_gold():
    vocab = toy_vocab(2)
    split = prepare_split(instances_for([set(), set()], 2), vocab,
                          logits=logits_from_matrix(np.zeros((2, 2))))
    model = toy_model(n=2, d=2, rank=2)
    with pytest.raises(ValueError, match="nonempty gold"):
        train(model, split, split)


def test_train_raises_on_non_finite_loss():
    split = make_tiny_task()
    split.theta1[0, 0] = np.nan
    model = toy_model(n=4, d=3, rank=2, iterations=1, epochs=1, batch_size=64)
    with pytest.raises(RuntimeError, match="non-finite loss"):
        train(model, split, split)


def test_train_is_deterministic_for_a_seed():
    model_a = toy_model(n=4, d=3, rank=2, iterations=2, epochs=3, batch_size=8, seed=5)
    model_b = toy_model(n=4, d=3, rank=2, iterations=2, epochs=3, batch_size=8, seed=5)
    split = make_tiny_task()
    dev = make_tiny_task(seed=1)
    ha = train(model_a, split, dev)
    hb = train(model_b, split, dev)
    assert ha == hb
    np.testing.assert_array_equal(model_a.e, model_b.e)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_on_a_fixed_batch(seed):
    from pcrf.embeddings import random_type_embeddings
    from pcrf.seeding import substream

    schema, splits = synth_task(seed=seed, train_size=32, dev_size=4, test_size=4)
    split = splits["train"]
    cfg = RunConfig(rank=16, hidden=32, dropout=0.0, iterations=4,
                    random_embeddings=True, embedding_dim=32, seed=seed)
    rng_init = substream(seed, "init")
    e = random_type_embeddings(len(schema.vocab), cfg.embedding_dim, rng_init)
    model = build_model(schema.vocab, cfg, e, rng_init)
    params = model.parameters()
    opt = AdamW(params)
    theta1 = split_theta1(model, split)
    gold = split.gold.astype(model.dtype)
    losses = []
    for _ in range(50):
        trajectory, cache = forward_batch(model, theta1)
        losses.append(bce_loss(trajectory[-1], gold, cfg.alpha))
        dq1 = bce_loss_grad(trajectory[-1], gold, cfg.alpha)
        grads, _ = backward_batch(model, cache, dq1)
        opt.step(params, grads)
    trajectory, _ = forward_batch(model, theta1)
    final = bce_loss(trajectory[-1], gold, cfg.alpha)
    assert final < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_trained_potentials_reflect_chain_cooccurrence():
    # types that co-occur (same-chain pairs) should end up with larger
    # theta11 entries than types that never do
    from pcrf.embeddings import random_type_embeddings
    from pcrf.potentials import compute_factors, recover_submatrices
    from pcrf.seeding import substream

    schema, splits = synth_task(seed=0)
    cfg = RunConfig(seed=0, **SYNTH_RUN)
    rng_init = substream(0, "init")
    e = random_type_embeddings(len(schema.vocab), cfg.embedding_dim, rng_init)
    model = build_model(schema.vocab, cfg, e, rng_init)
    train(model, splits["train"], splits["dev"])

    dm = model.astype(np.float64)
    e0, e1 = compute_factors(dm.e, dm.ffn0, dm.ffn1)
    chain_ids = [t for chain in schema.chains for t in chain]
    _, t11, _, _ = recover_submatrices(e0, e1, chain_ids)
    depth = len(schema.chains[0])
    within, cross = [], []
    for a in range(len(chain_ids)):
        for b in range(a + 1, len(chain_ids)):
            (within if a // depth == b // depth else cross).append(t11[a, b])
    assert np.mean(within) > np.mean(cross)


def test_evaluate_and_predict_split():
    split = make_tiny_task()
    model = toy_model(n=4, d=3, rank=2, iterations=3)
    report, rows = evaluate_split(model, split)
    assert report.instance_count == 24
    assert [r.iteration for r in rows] == [0, 1, 2, 3]
    report0, rows0 = evaluate_split(model, split, iterations=0)
    assert len(rows0) == 1
    preds = predict_split(model, split)
    assert len(preds) == 24 and all(isinstance(p, set) for p in preds)
    forced = predict_split(model, split, threshold=0.999, force_nonempty=True)
    assert all(len(p) == 1 for p in forced)


# ---------------------------------------------------------------------------
# checkpoints


def reference_checkpoint_bytes(model, extra_tensor=None):
    """Compose the container byte stream from the documented layout only."""
    import io
    from dataclasses import asdict

    cfg = model.config
    out = io.BytesIO()
    out.write(b"PCRFCKPT")
    n, d = model.e.shape
    h = model.ffn0.w1.shape[0] if model.ffn0.w1 is not None else 0
    r = model.ffn0.w2.shape[0] if model.ffn0.w2 is not None else d
    out.write(struct.pack("<IIIIII", 1, n, d, h, r, cfg.iterations))
    out.write(struct.pack("<dd", cfg.step_size, cfg.alpha))
    for phrase in model.vocab.phrases:
        b = phrase.encode("utf-8")
        out.write(struct.pack("<I", len(b)) + b)
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(blob)) + blob)
    tensors = dict(model.parameters())
    if extra_tensor is not None:
        tensors[extra_tensor] = np.zeros(1)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)) + nb)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def test_checkpoint_bytes_match_documented_layout(tmp_path):
    model = toy_model(n=3, d=2, rank=2, iterations=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    assert path.read_bytes() == reference_checkpoint_bytes(model)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = toy_model(n=5, d=4, rank=3, iterations=3, unary="bag")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.vocab == model.vocab
    assert loaded.config == model.config
    for name, arr in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name], arr), name
    theta1 = np.random.default_rng(0).standard_normal((4, 5))
    before, _ = forward_batch(model, theta1)
    after, _ = forward_batch(loaded, theta1)
    for a, b in zip(before, after):
        assert np.array_equal(a, b)


def test_checkpoint_single_precision_reloads_as_double(tmp_path):
    model = toy_model(n=3, d=2, rank=2, precision="single")
    assert model.e.dtype == np.float32
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.e.dtype == np.float64
    np.testing.assert_array_equal(loaded.e, model.e.astype(np.float64))


def test_checkpoint_error_paths(tmp_path):
    model = toy_model(n=3, d=2, rank=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(truncated)

    versioned = bytearray(raw)
    versioned[8:12] = struct.pack("<I", 99)
    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(versioned)
    with pytest.raises(ValueError, match="unsupported checkpoint version 99"):
        load_checkpoint(bad_version)

    twisted = bytearray(raw)
    twisted[28:32] = struct.pack("<I", model.config.iterations + 1)
    mismatch = tmp_path / "mismatch.ckpt"
    mismatch.write_bytes(twisted)
    with pytest.raises(ValueError, match="header disagrees"):
        load_checkpoint(mismatch)

    surplus = tmp_path / "surplus.ckpt"
    surplus.write_bytes(reference_checkpoint_bytes(model, extra_tensor="zz.bogus"))
    with pytest.raises(ValueError, match=r"unexpected tensors \['zz.bogus'\]"):
        load_checkpoint(surplus)


def test_config_round_trips_through_checkpoint(tmp_path):
    model = toy_model(n=3, d=2, rank=2, iterations=7, step_size=0.25, alpha=3.0,
                      exclude_self=True, threshold=0.4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    cfg = load_checkpoint(path).config
    assert cfg == model.config
