"""Damped mean-field updates over the low-rank pairwise model.

Each binary type variable keeps a two-way marginal (q0[j], q1[j]).  One
update recomputes both logits from the unary scores plus the expected
pairwise field, renormalizes with a two-way softmax, and moves the
marginals a fraction `step_size` of the way to the new value:

    l1 = theta1 + E1 (E1^T q1 - E0^T q0)
    l0 = theta0 + E0 (E0^T q0 - E1^T q1)
    q1 <- q1 + step_size * (sigmoid(l1 - l0) - q1)

The field sums over every other type and, in this vector form, also over
the type itself.  exclude_self=True subtracts that diagonal contribution,
recovering the per-variable update that skips k = j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .potentials import pairwise_field, self_field_terms
from .unary import UnaryScores

DEFAULT_ITERATIONS = 4
DEFAULT_STEP_SIZE = 0.5
DEFAULT_THRESHOLD = 0.5


@dataclass
class MarginalState:
    q0: np.ndarray
    q1: np.ndarray


def init_marginals(scores: UnaryScores) -> MarginalState:
    """Two-way softmax of the unary scores, computed as a stable sigmoid."""
    q1 = expit(scores.theta1 - scores.theta0)
    return MarginalState(q0=1.0 - q1, q1=q1)


def mfvi_step(state: MarginalState, scores: UnaryScores, e0, e1,
              step_size: float = DEFAULT_STEP_SIZE,
              exclude_self: bool = False) -> MarginalState:
    """One damped update; O(N R) time, no N x N intermediate."""
    f0, f1 = pairwise_field(e0, e1, state.q0, state.q1)
    l1 = scores.theta1 + f1
    l0 = scores.theta0 + f0
    if exclude_self:
        d00, d11, dx = self_field_terms(e0, e1)
        l1 = l1 - (d11 * state.q1 + dx * state.q0)
        l0 = l0 - (d00 * state.q0 + dx * state.q1)
    qhat1 = expit(l1 - l0)
    q1 = state.q1 + step_size * (qhat1 - state.q1)
    q0 = state.q0 + step_size * ((1.0 - qhat1) - state.q0)
    return MarginalState(q0=q0, q1=q1)


def run(scores: UnaryScores, e0, e1, iterations: int = DEFAULT_ITERATIONS,
        step_size: float = DEFAULT_STEP_SIZE, exclude_self: bool = False):
    """Trajectory [q^0, ..., q^T]; always length iterations + 1."""
    state = init_marginals(scores)
    trajectory = [state]
    for _ in range(iterations):
        state = mfvi_step(state, scores, e0, e1, step_size, exclude_self)
        trajectory.append(state)
    return trajectory


def decode(state: MarginalState, threshold: float = DEFAULT_THRESHOLD,
           force_nonempty: bool = False) -> set[int]:
    """Types with q1 strictly above the threshold.

    With force_nonempty, an empty decode falls back to the single argmax
    type; ties go to the lowest id.
    """
    picked = np.flatnonzero(state.q1 > threshold)
    if picked.size == 0 and force_nonempty:
        picked = [int(np.argmax(state.q1))]
    return {int(j) for j in picked}
