"""Low-rank pairwise potentials derived from type embeddings.

Two feed-forward maps turn the embedding matrix E (N x D) into factor
matrices E0 and E1 (N x R).  They define four pairwise log-potential
matrices that are never materialized:

    theta00 =  E0 E0^T   (both types absent)
    theta11 =  E1 E1^T   (both present)
    theta01 = -E0 E1^T   (row absent, column present)
    theta10 = -E1 E0^T   (row present, column absent)

Same-state pairs score the factor inner product, mixed-state pairs its
negation, so types with aligned factors attract and misaligned ones repel.
Every consumer works through R-dimensional intermediates, keeping each
inference step at O(N R) time and memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RANK = 128
DEFAULT_DROPOUT = 0.1


@dataclass
class FfnParams:
    """One factor map: factors = w2 @ tanh(mask * (w1 @ e)) per embedding row.

    w1 is None for the single-linear-map variant (no hidden layer, no tanh);
    both None for the identity variant that uses the embeddings directly.
    """

    w1: np.ndarray | None   # (H, D)
    w2: np.ndarray | None   # (R, H), or (R, D) when w1 is None
    dropout: float = DEFAULT_DROPOUT


def _uniform_init(fan_out, fan_in, rng, dtype=np.float64):
    # a = sqrt(6 / (fan_in + fan_out)), the usual tanh-friendly range
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in)).astype(dtype)


def init_ffn(dim, rank, hidden=None, dropout=DEFAULT_DROPOUT, variant="tanh",
             rng=None, dtype=np.float64) -> FfnParams:
    """Fresh parameters for one factor map.

    variant: "tanh" (two layers, default), "linear" (one map, no hidden
    layer), or "identity" (no parameters; requires rank == dim).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if variant == "identity":
        if rank != dim:
            raise ValueError(f"identity factor map needs rank == dim, got {rank} != {dim}")
        return FfnParams(w1=None, w2=None, dropout=dropout)
    if variant == "linear":
        return FfnParams(w1=None, w2=_uniform_init(rank, dim, rng, dtype), dropout=dropout)
    if variant != "tanh":
        raise ValueError(f"unknown factor map variant {variant!r}")
    hidden = dim if hidden is None else hidden
    return FfnParams(
        w1=_uniform_init(hidden, dim, rng, dtype),
        w2=_uniform_init(rank, hidden, rng, dtype),
        dropout=dropout,
    )


def dropout_mask(shape, rate, rng, dtype=np.float64):
    """Inverted-dropout mask: 0 with probability `rate`, else 1 / (1 - rate)."""
    if rate <= 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def ffn_forward(e, params: FfnParams, mask=None):
    """Factor matrix (N, R) for embeddings (N, D); returns (factors, cache).

    The dropout mask applies to the pre-activation w1 @ e, before the tanh.
    Pass mask=None for evaluation; the cache feeds ffn_backward.
    """
    if params.w2 is None:
        return e, None
    if params.w1 is None:
        return e @ params.w2.T, None
    pre = e @ params.w1.T
    if mask is not None:
        pre = pre * mask
    z = np.tanh(pre)
    return z @ params.w2.T, (z, mask)


def ffn_backward(e, params: FfnParams, cache, gfactors):
    """Gradients of a loss w.r.t. one factor map, given d(loss)/d(factors).

    Returns (gw1, gw2, ge); entries are None where the variant has no such
    parameter.  The cached dropout mask is replayed exactly.
    """
    if params.w2 is None:
        return None, None, gfactors
    if params.w1 is None:
        return None, gfactors.T @ e, gfactors @ params.w2
    z, mask = cache
    gw2 = gfactors.T @ z
    gz = gfactors @ params.w2
    gpre = gz * (1.0 - z * z)
    if mask is not None:
        gpre = gpre * mask
    return gpre.T @ e, gw2, gpre @ params.w1


def compute_factors(e, ffn0: FfnParams, ffn1: FfnParams, training=False, rng=None):
    """Both factor matrices (E0, E1).

    With training=True a fresh dropout mask is drawn from `rng` for each
    map's pre-activation; evaluation is deterministic.
    """
    m0 = m1 = None
    if training:
        if rng is None:
            raise ValueError("training-mode factors need an rng for dropout")
        if ffn0.w1 is not None:
            m0 = dropout_mask((e.shape[0], ffn0.w1.shape[0]), ffn0.dropout, rng, e.dtype)
        if ffn1.w1 is not None:
            m1 = dropout_mask((e.shape[0], ffn1.w1.shape[0]), ffn1.dropout, rng, e.dtype)
    e0, _ = ffn_forward(e, ffn0, m0)
    e1, _ = ffn_forward(e, ffn1, m1)
    return e0, e1


def pairwise_field(e0, e1, q0, q1):
    """Mean pairwise contribution to each type's two log-potentials.

        f1 = theta11 @ q1 + theta10 @ q0 = E1 (E1^T q1 - E0^T q0)
        f0 = theta00 @ q0 + theta01 @ q1 = E0 (E0^T q0 - E1^T q1)

    Computed through the R-dimensional totals, never through an N x N
    matrix.  Returns (f0, f1).
    """
    s1 = e1.T @ q1
    s0 = e0.T @ q0
    f1 = e1 @ (s1 - s0)
    f0 = e0 @ (s0 - s1)
    return f0, f1


def self_field_terms(e0, e1):
    """Diagonals of the four potential matrices, as N-vectors (d00, d11, dx).

    dx is the shared diagonal of theta01 and theta10; the two coincide
    because both reduce to -sum_r E0[j, r] E1[j, r].
    """
    d00 = np.einsum("nr,nr->n", e0, e0)
    d11 = np.einsum("nr,nr->n", e1, e1)
    dx = -np.einsum("nr,nr->n", e0, e1)
    return d00, d11, dx


def recover_submatrices(e0, e1, ids=None):
    """Dense (theta00, theta11, theta01, theta10) for the selected type ids.

    Intended for inspection and small-scale verification only; cost is
    quadratic in len(ids).  theta10 is produced as the transpose of theta01,
    which the factorization makes exact, not merely approximate.
    """
    a0 = e0 if ids is None else np.asarray(e0)[list(ids)]
    a1 = e1 if ids is None else np.asarray(e1)[list(ids)]
    t00 = a0 @ a0.T
    t11 = a1 @ a1.T
    t01 = -(a0 @ a1.T)
    t10 = t01.T.copy()
    return t00, t11, t01, t10
