"""End-to-end training through the unrolled mean-field updates.

The forward pass runs the damped updates for a whole batch at once and the
backward pass replays them in reverse, accumulating exact gradients into
every parameter: the unary scores, the type embeddings, and both factor
maps, with dropout masks replayed rather than redrawn.  No autodiff
framework sits underneath; the chain rule is written out by hand and is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.special import expit

from . import metrics
from .dataset import TypeVocabulary
from .embeddings import DEFAULT_DIM
from .mfvi import (DEFAULT_ITERATIONS, DEFAULT_STEP_SIZE, DEFAULT_THRESHOLD,
                   MarginalState, decode)
from .potentials import (DEFAULT_DROPOUT, DEFAULT_RANK, FfnParams, dropout_mask,
                         ffn_backward, ffn_forward, init_ffn, self_field_terms)
from .seeding import substream
from .unary import DEFAULT_WINDOW, context_bag_vector

DEFAULT_ALPHA = 2.0
DEFAULT_LR = 1e-3
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_BATCH_SIZE = 32
DEFAULT_EPOCHS = 50
DEFAULT_PATIENCE = 10

PROB_CLAMP = 1e-7


@dataclass
class RunConfig:
    """Every shared knob in one place.

    The field defaults here are the single source of truth; the CLI parser
    mirrors them and a test asserts the two never drift apart.
    """

    rank: int = DEFAULT_RANK
    hidden: int | None = None            # None means "equal to the embedding dim"
    dropout: float = DEFAULT_DROPOUT
    ffn_variant: str = "tanh"            # tanh | linear | identity
    iterations: int = DEFAULT_ITERATIONS
    step_size: float = DEFAULT_STEP_SIZE
    threshold: float = DEFAULT_THRESHOLD
    force_nonempty: bool = False
    exclude_self: bool = False
    unary: str = "file"                  # file | bag
    window: int = DEFAULT_WINDOW
    alpha: float = DEFAULT_ALPHA
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_eps: float = DEFAULT_ADAM_EPS
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    patience: int = DEFAULT_PATIENCE
    precision: str = "single"            # single | double
    embedding_dim: int = DEFAULT_DIM     # used when embeddings are random
    random_embeddings: bool = False
    seed: int = 0

    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class Model:
    vocab: TypeVocabulary
    e: np.ndarray                  # (N, D) type embeddings, trainable
    ffn0: FfnParams
    ffn1: FfnParams
    projection: np.ndarray | None  # (N, D) bag-encoder map; None with file logits
    bias: np.ndarray | None
    config: RunConfig

    @property
    def dtype(self):
        return self.e.dtype

    def parameters(self) -> dict:
        """Trainable tensors by name; values are the live arrays."""
        params = {"type_embeddings": self.e}
        for tag, ffn in (("ffn0", self.ffn0), ("ffn1", self.ffn1)):
            if ffn.w1 is not None:
                params[f"{tag}.w1"] = ffn.w1
            if ffn.w2 is not None:
                params[f"{tag}.w2"] = ffn.w2
        if self.projection is not None:
            params["unary.projection"] = self.projection
            params["unary.bias"] = self.bias
        return params

    def astype(self, dtype) -> "Model":
        def cast(a):
            return None if a is None else a.astype(dtype)
        return Model(
            vocab=self.vocab,
            e=cast(self.e),
            ffn0=FfnParams(cast(self.ffn0.w1), cast(self.ffn0.w2), self.ffn0.dropout),
            ffn1=FfnParams(cast(self.ffn1.w1), cast(self.ffn1.w2), self.ffn1.dropout),
            projection=cast(self.projection),
            bias=cast(self.bias),
            config=self.config,
        )


def build_model(vocab: TypeVocabulary, cfg: RunConfig, type_embeddings, rng=None) -> Model:
    """Fresh model around the given (N, D) embedding matrix."""
    if rng is None:
        rng = substream(cfg.seed, "init")
    dtype = cfg.dtype()
    e = np.array(type_embeddings, dtype=dtype)
    if e.shape[0] != len(vocab):
        raise ValueError(f"embeddings for {e.shape[0]} types, vocabulary has {len(vocab)}")
    d = e.shape[1]
    ffn0 = init_ffn(d, cfg.rank, cfg.hidden, cfg.dropout, cfg.ffn_variant, rng, dtype)
    ffn1 = init_ffn(d, cfg.rank, cfg.hidden, cfg.dropout, cfg.ffn_variant, rng, dtype)
    projection = bias = None
    if cfg.unary == "bag":
        a = np.sqrt(6.0 / (d + len(vocab)))
        projection = rng.uniform(-a, a, size=(len(vocab), d)).astype(dtype)
        bias = np.zeros(len(vocab), dtype=dtype)
    elif cfg.unary != "file":
        raise ValueError(f"unknown unary scorer {cfg.unary!r}")
    return Model(vocab, e, ffn0, ffn1, projection, bias, cfg)


# ---------------------------------------------------------------------------
# forward / loss / backward


def make_dropout_masks(model: Model, rng):
    """One fresh pre-activation mask per factor map; None where not applicable."""
    masks = []
    for ffn in (model.ffn0, model.ffn1):
        if ffn.w1 is not None and ffn.dropout > 0.0:
            masks.append(dropout_mask((model.e.shape[0], ffn.w1.shape[0]),
                                      ffn.dropout, rng, model.dtype))
        else:
            masks.append(None)
    return tuple(masks)


def forward_batch(model: Model, theta1, training=False, rng=None, masks=None):
    """Unrolled damped updates for a batch of unary scores.

    theta1: (B, N).  Returns (trajectory, cache) where trajectory is the
    list of q1 matrices [(B, N)] for t = 0..T.  `masks` replays fixed
    dropout masks; `training` with an rng draws fresh ones.

    The two fields are folded into one logit difference per step:
    f1 - f0 = (E0 + E1)(E1^T q1 - E0^T q0), which halves the matmuls.
    """
    cfg = model.config
    if training and masks is None:
        masks = make_dropout_masks(model, rng)
    if masks is None:
        masks = (None, None)
    e0, c0 = ffn_forward(model.e, model.ffn0, masks[0])
    e1, c1 = ffn_forward(model.e, model.ffn1, masks[1])
    esum = e0 + e1
    diag = self_field_terms(e0, e1) if cfg.exclude_self else None

    q1 = expit(theta1)
    q0 = 1.0 - q1
    trajectory = [q1]
    steps = []
    for _ in range(cfg.iterations):
        dvec = q1 @ e1 - q0 @ e0            # (B, R)
        u = theta1 + dvec @ esum.T
        if diag is not None:
            d00, d11, dx = diag
            u = u - (d11 * q1 + dx * q0) + (d00 * q0 + dx * q1)
        qhat1 = expit(u)
        steps.append((q1, q0, dvec, qhat1))
        q1 = q1 + cfg.step_size * (qhat1 - q1)
        q0 = q0 + cfg.step_size * ((1.0 - qhat1) - q0)
        trajectory.append(q1)
    cache = {"e0": e0, "e1": e1, "c0": c0, "c1": c1, "esum": esum,
             "steps": steps, "theta1": theta1, "q1_0": trajectory[0],
             "diag": diag, "masks": masks}
    return trajectory, cache


def bce_loss(q1, gold, alpha: float = DEFAULT_ALPHA) -> float:
    """Alpha-weighted binary cross-entropy, averaged over every type slot.

    gold is a 0/1 array shaped like q1; q1 is clamped to
    [1e-7, 1 - 1e-7] before the logs.  Positive slots weigh in at alpha.
    """
    qc = np.clip(q1, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = alpha * gold * np.log(qc) + (1.0 - gold) * np.log1p(-qc)
    return float(-terms.mean())


def bce_loss_grad(q1, gold, alpha: float = DEFAULT_ALPHA):
    """d(bce_loss)/d(q1); zero where the clamp is active."""
    qc = np.clip(q1, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -(alpha * gold / qc - (1.0 - gold) / (1.0 - qc)) / q1.size
    g[(q1 < PROB_CLAMP) | (q1 > 1.0 - PROB_CLAMP)] = 0.0
    return g


def backward_batch(model: Model, cache, dq1):
    """Exact reverse pass through the unrolled forward.

    dq1 is the loss gradient at the final q1.  Returns (grads, dtheta1)
    where grads covers the embedding and factor-map parameters and dtheta1
    is the (B, N) gradient at the unary scores, ready for whatever scorer
    produced them.
    """
    cfg = model.config
    lam = cfg.step_size
    e0, e1, esum = cache["e0"], cache["e1"], cache["esum"]
    diag = cache["diag"]
    gq1 = dq1
    gq0 = np.zeros_like(dq1)
    ge0 = np.zeros_like(e0)
    ge1 = np.zeros_like(e1)
    gtheta1 = np.zeros_like(cache["theta1"])

    for q1, q0, dvec, qhat1 in reversed(cache["steps"]):
        du = lam * (gq1 - gq0) * qhat1 * (1.0 - qhat1)
        gq1 = (1.0 - lam) * gq1
        gq0 = (1.0 - lam) * gq0
        gtheta1 += du

        g_esum = du.T @ dvec                # u = theta1 + dvec @ esum^T
        ge0 += g_esum
        ge1 += g_esum
        gdvec = du @ esum
        gq1 += gdvec @ e1.T                 # dvec = q1 @ e1 - q0 @ e0
        ge1 += q1.T @ gdvec
        gq0 -= gdvec @ e0.T
        ge0 -= q0.T @ gdvec

        if diag is not None:
            d00, d11, dx = diag
            gq1 += du * (dx - d11)
            gq0 += du * (d00 - dx)
            gd11 = -(du * q1).sum(axis=0)
            gd00 = (du * q0).sum(axis=0)
            gdx = (du * (q1 - q0)).sum(axis=0)
            ge1 += 2.0 * gd11[:, None] * e1 - gdx[:, None] * e0
            ge0 += 2.0 * gd00[:, None] * e0 - gdx[:, None] * e1

    q1_0 = cache["q1_0"]
    gtheta1 += (gq1 - gq0) * q1_0 * (1.0 - q1_0)   # q1^0 = sigmoid(theta1)

    grads = {"type_embeddings": np.zeros_like(model.e)}
    for tag, ffn, c, gf in (("ffn0", model.ffn0, cache["c0"], ge0),
                            ("ffn1", model.ffn1, cache["c1"], ge1)):
        gw1, gw2, ge = ffn_backward(model.e, ffn, c, gf)
        if gw1 is not None:
            grads[f"{tag}.w1"] = gw1
        if gw2 is not None:
            grads[f"{tag}.w2"] = gw2
        grads["type_embeddings"] += ge
    return grads, gtheta1


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay.

    Decay multiplies the weights by (1 - lr * weight_decay) before the
    moment step, so a zero gradient still shrinks them and the moment
    estimates never see the decay.
    """

    def __init__(self, params, lr=DEFAULT_LR, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2,
                 eps=DEFAULT_ADAM_EPS, weight_decay=DEFAULT_WEIGHT_DECAY):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """One update, in place."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# data plumbing shared by train / eval / predict


@dataclass
class PreparedSplit:
    """Dense arrays for one split; float64 at rest, cast per batch."""

    gold: np.ndarray               # (M, N) 0/1
    theta1: np.ndarray | None      # (M, N) file logits
    h: np.ndarray | None           # (M, D) context-bag features
    trainable: np.ndarray          # indices of instances with nonempty gold


def prepare_split(instances, vocab, logits=None, table=None,
                  window: int = DEFAULT_WINDOW) -> PreparedSplit:
    """Build the arrays once; logits rows are keyed by instance position."""
    n = len(vocab)
    gold = np.zeros((len(instances), n))
    for i, inst in enumerate(instances):
        if inst.gold:
            gold[i, sorted(inst.gold)] = 1.0
    theta1 = h = None
    if logits is not None:
        theta1 = np.stack([logits.scores_for(i).theta1 for i in range(len(instances))])
        if theta1.shape[1] != n:
            raise ValueError(f"logits have {theta1.shape[1]} types, vocabulary has {n}")
    elif table is not None:
        h = np.stack([context_bag_vector(inst, table, window) for inst in instances])
    else:
        raise ValueError("either a logits file or a word vector table is required")
    trainable = np.flatnonzero(gold.sum(axis=1) > 0)
    return PreparedSplit(gold, theta1, h, trainable)


def split_theta1(model: Model, split: PreparedSplit, ids=None):
    """Unary scores for the selected instances, in the model dtype."""
    if split.theta1 is not None:
        t = split.theta1 if ids is None else split.theta1[ids]
        return t.astype(model.dtype)
    h = (split.h if ids is None else split.h[ids]).astype(model.dtype)
    return h @ model.projection.T + model.bias


# ---------------------------------------------------------------------------
# evaluation helpers


def batch_trajectories(model: Model, split: PreparedSplit, iterations=None,
                       chunk: int = 1024):
    """Instance-major MarginalState trajectories for a whole split."""
    cfg = model.config
    if iterations is not None and iterations != cfg.iterations:
        model = Model(model.vocab, model.e, model.ffn0, model.ffn1,
                      model.projection, model.bias, replace(cfg, iterations=iterations))
    trajectories = []
    m = split.gold.shape[0]
    for start in range(0, m, chunk):
        ids = np.arange(start, min(start + chunk, m))
        theta1 = split_theta1(model, split, ids)
        traj, _ = forward_batch(model, theta1)
        for i in range(ids.size):
            trajectories.append([MarginalState(q0=1.0 - q1[i], q1=q1[i]) for q1 in traj])
    return trajectories


def evaluate_split(model: Model, split: PreparedSplit, iterations=None,
                   threshold=None, force_nonempty=None):
    """(EvalReport, per-iteration rows) for one split."""
    cfg = model.config
    threshold = cfg.threshold if threshold is None else threshold
    force_nonempty = cfg.force_nonempty if force_nonempty is None else force_nonempty
    trajectories = batch_trajectories(model, split, iterations)
    golds = [set(np.flatnonzero(row)) for row in split.gold]
    preds = [decode(traj[-1], threshold, force_nonempty) for traj in trajectories]
    report = metrics.evaluate(preds, golds)
    rows = metrics.per_iteration_eval(trajectories, golds, threshold)
    return report, rows


def predict_split(model: Model, split: PreparedSplit, threshold=None,
                  force_nonempty=None):
    """Decoded type-id sets for every instance in the split."""
    cfg = model.config
    threshold = cfg.threshold if threshold is None else threshold
    force_nonempty = cfg.force_nonempty if force_nonempty is None else force_nonempty
    trajectories = batch_trajectories(model, split)
    return [decode(traj[-1], threshold, force_nonempty) for traj in trajectories]


# ---------------------------------------------------------------------------
# training loop


def train(model: Model, train_split: PreparedSplit, dev_split: PreparedSplit):
    """Optimize the model in place; returns the per-epoch history.

    Batches are reshuffled each epoch from the shuffle stream; instances
    with empty gold sets never enter a batch.   Dev macro-F1 picks the best
    epoch, training stops after `patience` epochs without a new best, and
    the best epoch's weights are restored before returning.
    """
    cfg = model.config
    rng_shuffle = substream(cfg.seed, "shuffle")
    rng_dropout = substream(cfg.seed, "dropout")
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    pool = train_split.trainable
    if pool.size == 0:
        raise ValueError("no training instances with nonempty gold sets")

    best_f1 = -1.0
    best_epoch = -1
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0
    history = []
    for epoch in range(cfg.epochs):
        order = pool[rng_shuffle.permutation(pool.size)]
        total = 0.0
        for bi, start in enumerate(range(0, order.size, cfg.batch_size)):
            ids = order[start:start + cfg.batch_size]
            theta1 = split_theta1(model, train_split, ids)
            gold = train_split.gold[ids].astype(model.dtype)
            trajectory, cache = forward_batch(model, theta1, training=True, rng=rng_dropout)
            loss = bce_loss(trajectory[-1], gold, cfg.alpha)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch {bi}; "
                    f"check the unary scores and learning rate")
            dq1 = bce_loss_grad(trajectory[-1], gold, cfg.alpha)
            grads, gtheta1 = backward_batch(model, cache, dq1)
            if model.projection is not None:
                hb = train_split.h[ids].astype(model.dtype)
                grads["unary.projection"] = gtheta1.T @ hb
                grads["unary.bias"] = gtheta1.sum(axis=0)
            opt.step(params, grads)
            total += loss * ids.size
        dev_report, _ = evaluate_split(model, dev_split)
        history.append({
            "epoch": epoch,
            "train_loss": total / order.size,
            "dev_macro_p": dev_report.macro_p,
            "dev_macro_r": dev_report.macro_r,
            "dev_macro_f1": dev_report.macro_f1,
        })
        if dev_report.macro_f1 > best_f1:
            best_f1 = dev_report.macro_f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, v in best_params.items():
        params[k][...] = v
    for row in history:
        row["best_epoch"] = best_epoch
    return history


# ---------------------------------------------------------------------------
# checkpoint container


CHECKPOINT_MAGIC = b"PCRFCKPT"
CHECKPOINT_VERSION = 1


def _read_exact(fh, size, path):
    data = fh.read(size)
    if len(data) != size:
        raise ValueError(f"{path}: truncated checkpoint")
    return data


def save_checkpoint(path, model: Model):
    """Write the versioned binary container.

    Layout (integers little-endian; see the README for the byte map):
    magic "PCRFCKPT" | u32 version | u32 n | u32 d | u32 h (0 if no hidden
    layer) | u32 r | u32 iterations | f64 step_size | f64 alpha |
    n x (u32 length, utf-8 phrase) | u32 length, utf-8 config json |
    u32 tensor count, then per tensor: u32 name length, utf-8 name,
    u32 ndim, ndim x u64 dims, row-major f64 data.

    Tensors are stored in double precision regardless of the training
    dtype, so a reload reproduces double-precision forwards bit for bit.
    """
    cfg = model.config
    n, d = model.e.shape
    h = model.ffn0.w1.shape[0] if model.ffn0.w1 is not None else 0
    r = model.ffn0.w2.shape[0] if model.ffn0.w2 is not None else d
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIII", CHECKPOINT_VERSION, n, d, h, r, cfg.iterations))
        fh.write(struct.pack("<dd", cfg.step_size, cfg.alpha))
        for phrase in model.vocab.phrases:
            b = phrase.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
        blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Model:
    """Read a container written by save_checkpoint; parameters come back in
    double precision."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, n, d, h, r, iterations = struct.unpack(
            "<IIIIII", _read_exact(fh, 24, path))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        step_size, alpha = struct.unpack("<dd", _read_exact(fh, 16, path))
        phrases = []
        for _ in range(n):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, path))
            phrases.append(_read_exact(fh, length, path).decode("utf-8"))
        (length,) = struct.unpack("<I", _read_exact(fh, 4, path))
        cfg = RunConfig(**json.loads(_read_exact(fh, length, path).decode("utf-8")))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        tensors = {}
        for _ in range(count):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, length, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
            data = _read_exact(fh, 8 * int(np.prod(shape, dtype=np.int64)), path)
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()

    # consistency between the fixed header and the stored payload
    if (cfg.iterations, cfg.step_size, cfg.alpha) != (iterations, step_size, alpha):
        raise ValueError(f"{path}: header disagrees with the config record")
    e = tensors.pop("type_embeddings")
    if e.shape != (n, d):
        raise ValueError(f"{path}: type_embeddings is {e.shape}, header says {(n, d)}")
    ffn0 = FfnParams(tensors.pop("ffn0.w1", None), tensors.pop("ffn0.w2", None), cfg.dropout)
    ffn1 = FfnParams(tensors.pop("ffn1.w1", None), tensors.pop("ffn1.w2", None), cfg.dropout)
    if ffn0.w1 is not None and ffn0.w1.shape[0] != h:
        raise ValueError(f"{path}: ffn0.w1 has {ffn0.w1.shape[0]} hidden units, header says {h}")
    if ffn0.w2 is not None and ffn0.w2.shape[0] != r:
        raise ValueError(f"{path}: ffn0.w2 has rank {ffn0.w2.shape[0]}, header says {r}")
    projection = tensors.pop("unary.projection", None)
    bias = tensors.pop("unary.bias", None)
    if tensors:
        raise ValueError(f"{path}: unexpected tensors {sorted(tensors)}")
    return Model(TypeVocabulary(phrases), e, ffn0, ffn1, projection, bias, cfg)
