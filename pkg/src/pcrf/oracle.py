"""Exact inference over small dense pairwise models, by enumeration.

Everything here is deliberately independent of the low-rank machinery: the
model is four dense matrices plus unary scores, and all quantities come
from walking every assignment.  Enumeration follows binary-reflected Gray
code, so consecutive assignments differ in one variable and each score is
an O(N) delta away from the previous one; that keeps the walk usable up to
the 20-variable guard.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

MAX_VARIABLES = 20


class DensePcrf:
    """Dense pairwise model over n binary variables.

    theta1/theta0: unary scores, shape (n,).  theta00/theta11/theta01/
    theta10: pairwise matrices, shape (n, n); entry [j, k] scores the
    (y_j, y_k) state named by the suffix, so theta10[j, k] applies when
    y_j = 1 and y_k = 0.  theta00 and theta11 must be symmetric and
    theta01 must equal theta10^T, since all four describe unordered pairs.

    An assignment scores sum_j theta_u(y_j) + sum_{j<k} theta_p(y_j, y_k).
    include_self_term adds 0.5 * theta_p(y_j, y_j) per variable, the energy
    whose mean-field update matches the vector form that sums the field
    over all k including k = j; the half compensates for the pair sum
    visiting each unordered pair once.
    """

    def __init__(self, theta1, theta0, theta00, theta11, theta01, theta10,
                 include_self_term=False, tol=1e-6):
        self.theta1 = np.asarray(theta1, dtype=np.float64)
        self.n = self.theta1.shape[0]
        if self.n > MAX_VARIABLES:
            raise ValueError(f"enumeration is capped at {MAX_VARIABLES} variables, got {self.n}")
        self.theta0 = np.asarray(theta0, dtype=np.float64)
        self.theta00 = np.asarray(theta00, dtype=np.float64)
        self.theta11 = np.asarray(theta11, dtype=np.float64)
        self.theta01 = np.asarray(theta01, dtype=np.float64)
        self.theta10 = np.asarray(theta10, dtype=np.float64)
        for name, m in (("theta00", self.theta00), ("theta11", self.theta11),
                        ("theta01", self.theta01), ("theta10", self.theta10)):
            if m.shape != (self.n, self.n):
                raise ValueError(f"{name} must be ({self.n}, {self.n}), got {m.shape}")
        if np.max(np.abs(self.theta00 - self.theta00.T)) > tol:
            raise ValueError("theta00 is not symmetric")
        if np.max(np.abs(self.theta11 - self.theta11.T)) > tol:
            raise ValueError("theta11 is not symmetric")
        if np.max(np.abs(self.theta01 - self.theta10.T)) > tol:
            raise ValueError("theta01 does not match theta10^T")
        self.include_self_term = bool(include_self_term)

    def _pair(self, j, k, yj, yk):
        if yj:
            return self.theta11[j, k] if yk else self.theta10[j, k]
        return self.theta01[j, k] if yk else self.theta00[j, k]

    def score_assignment(self, y) -> float:
        """Direct score of one 0/1 assignment; quadratic in n by design."""
        y = np.asarray(y)
        score = float(np.where(y == 1, self.theta1, self.theta0).sum())
        for j in range(self.n):
            for k in range(j + 1, self.n):
                score += self._pair(j, k, y[j], y[k])
            if self.include_self_term:
                score += 0.5 * self._pair(j, j, y[j], y[j])
        return score

    def _flip_tables(self):
        """Per-variable score deltas for the Gray walk.

        Flipping variable m from 0 to 1 changes the score by
        base[m] + dd[m] @ y, where y holds the other variables (the
        diagonal of dd is zero so y[m] cannot leak in).  Pair entries are
        read from the triangle that defines them, j < k, so no symmetry
        assumption sneaks into the deltas.
        """
        up = np.triu_indices(self.n, k=1)

        def ordered(mat):
            # full[m, k] = entry for the unordered pair, row-indexed by m
            full = np.zeros((self.n, self.n))
            full[up] = mat[up]
            return full

        # value of y_m crossed with value of y_k, entries from the j < k triangle
        p11 = ordered(self.theta11) + ordered(self.theta11).T
        p10 = ordered(self.theta10) + ordered(self.theta01).T
        p01 = ordered(self.theta01) + ordered(self.theta10).T
        p00 = ordered(self.theta00) + ordered(self.theta00).T

        dd = (p11 - p01) - (p10 - p00)           # coefficient of y_k
        base = self.theta1 - self.theta0 + (p10 - p00).sum(axis=1)
        if self.include_self_term:
            base = base + 0.5 * (np.diag(self.theta11) - np.diag(self.theta00))
        return base, dd

    def _walk(self):
        """Yield (index, score) over all 2^n assignments in Gray-code order.

        The assignment at index i is the bit pattern i ^ (i >> 1); each step
        flips one variable and applies an O(n) score delta.
        """
        base, dd = self._flip_tables()
        y = np.zeros(self.n)
        score = self.score_assignment(y)
        yield 0, score
        for i in range(1, 1 << self.n):
            m = (i & -i).bit_length() - 1
            delta = base[m] + dd[m] @ y
            if y[m] == 1.0:
                score -= delta
                y[m] = 0.0
            else:
                score += delta
                y[m] = 1.0
            yield i, score

    @staticmethod
    def _assignment(gray_index, n):
        bits = gray_index ^ (gray_index >> 1)
        return tuple((bits >> j) & 1 for j in range(n))

    def exact_marginals(self):
        """(q1, logz): per-variable on-probabilities and the log partition."""
        total = 1 << self.n
        scores = np.empty(total)
        for i, s in self._walk():
            scores[i] = s
        logz = float(logsumexp(scores))
        idx = np.arange(total, dtype=np.uint32)
        gray = idx ^ (idx >> 1)
        q1 = np.empty(self.n)
        for j in range(self.n):
            on = (gray >> j) & 1 == 1
            q1[j] = np.exp(logsumexp(scores[on]) - logz)
        return q1, logz

    def exact_map(self) -> np.ndarray:
        """Highest-scoring assignment; exact ties go to the lexicographically
        smallest bit vector (y[0] compared first)."""
        best_score = None
        best = None
        for i, score in self._walk():
            if best_score is None or score > best_score:
                best_score = score
                best = self._assignment(i, self.n)
            elif score == best_score:
                cand = self._assignment(i, self.n)
                if cand < best:
                    best = cand
        return np.array(best, dtype=np.int64)
