"""Enumeration oracle, cross-checked against a second brute force.

The reference implementation below shares no code with the package: it
walks assignments with itertools.product and scores each one with an
explicit pair loop, while the package walks a Gray code and applies score
deltas.  Agreement between the two routes is the point of the test.
"""

import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from pcrf.oracle import MAX_VARIABLES, DensePcrf

from conftest import dense_from_factors, random_factors


def brute_force(theta1, theta0, t00, t11, t01, t10, include_self=False):
    """(q1, logz, map_assignment) by direct enumeration, product order."""
    n = len(theta1)

    def pair(j, k, yj, yk):
        if yj and yk:
            return t11[j, k]
        if yj and not yk:
            return t10[j, k]
        if yk:
            return t01[j, k]
        return t00[j, k]

    assignments = list(itertools.product([0, 1], repeat=n))
    scores = []
    for y in assignments:
        s = sum(theta1[j] if y[j] else theta0[j] for j in range(n))
        for j in range(n):
            for k in range(j + 1, n):
                s += pair(j, k, y[j], y[k])
            if include_self:
                s += 0.5 * pair(j, j, y[j], y[j])
        scores.append(s)
    scores = np.array(scores)
    logz = float(logsumexp(scores))
    q1 = np.array([
        np.exp(logsumexp([s for y, s in zip(assignments, scores) if y[j]]) - logz)
        for j in range(n)
    ])
    best = max(range(len(assignments)),
               key=lambda i: (scores[i], tuple(-b for b in assignments[i])))
    return q1, logz, np.array(assignments[best])


def random_dense_model(rng, n, include_self=False, scale=0.3):
    e0, e1 = random_factors(rng, n, rank=2, scale=scale)
    t00, t11, t01, t10 = dense_from_factors(e0, e1)
    theta1 = rng.standard_normal(n)
    theta0 = rng.standard_normal(n)
    return (theta1, theta0, t00, t11, t01, t10), DensePcrf(
        theta1, theta0, t00, t11, t01, t10, include_self_term=include_self)


def test_single_variable_uniform():
    m = DensePcrf([0.0], [0.0], [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    q1, logz = m.exact_marginals()
    assert q1[0] == pytest.approx(0.5)
    assert logz == pytest.approx(math.log(2.0))


def test_single_variable_frozen():
    m = DensePcrf([math.log(3.0)], [0.0], [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    q1, logz = m.exact_marginals()
    assert q1[0] == pytest.approx(0.75)
    assert logz == pytest.approx(1.3862943611198906)


def test_two_variable_frozen():
    theta1 = [0.5, -0.3]
    t00 = [[0.10, -0.20], [-0.20, 0.30]]
    t11 = [[0.20, 0.40], [0.40, -0.10]]
    t01 = [[0.00, 0.15], [-0.25, 0.05]]
    t10 = np.array(t01).T
    m = DensePcrf(theta1, [0.0, 0.0], t00, t11, t01, t10)
    q1, logz = m.exact_marginals()
    assert logz == pytest.approx(1.5656078454011746, abs=1e-12)
    assert q1[0] == pytest.approx(0.6490628731651613, abs=1e-12)
    assert q1[1] == pytest.approx(0.560606055053777, abs=1e-12)

    m_self = DensePcrf(theta1, [0.0, 0.0], t00, t11, t01, t10, include_self_term=True)
    q1s, logzs = m_self.exact_marginals()
    assert logzs == pytest.approx(1.6910123834922475, abs=1e-12)
    assert q1s[0] == pytest.approx(0.6570104626734987, abs=1e-12)
    assert q1s[1] == pytest.approx(0.5117537546704392, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
@pytest.mark.parametrize("include_self", [False, True])
def test_marginals_match_brute_force(n, include_self):
    rng = np.random.default_rng(100 + n)
    for _ in range(3):
        args, model = random_dense_model(rng, n, include_self)
        q1_ref, logz_ref, _ = brute_force(*args, include_self=include_self)
        q1, logz = model.exact_marginals()
        np.testing.assert_allclose(q1, q1_ref, atol=1e-10)
        assert logz == pytest.approx(logz_ref, abs=1e-10)


@pytest.mark.parametrize("include_self", [False, True])
def test_map_matches_brute_force(include_self):
    rng = np.random.default_rng(7)
    for n in (2, 3, 5):
        args, model = random_dense_model(rng, n, include_self)
        _, _, y_ref = brute_force(*args, include_self=include_self)
        np.testing.assert_array_equal(model.exact_map(), y_ref)


def test_map_frozen_and_tie_break():
    z2 = np.zeros((2, 2))
    m = DensePcrf([1.0, -1.0], [0.0, 0.0], z2, z2, z2, z2)
    np.testing.assert_array_equal(m.exact_map(), [1, 0])
    # all 2^n scores tie; the lexicographically smallest assignment wins
    tie = DensePcrf([0.0, 0.0], [0.0, 0.0], z2, z2, z2, z2)
    np.testing.assert_array_equal(tie.exact_map(), [0, 0])


def test_walk_scores_match_direct_scoring():
    rng = np.random.default_rng(3)
    for include_self in (False, True):
        _, model = random_dense_model(rng, 5, include_self)
        for i, score in model._walk():
            y = model._assignment(i, 5)
            assert score == pytest.approx(model.score_assignment(y), abs=1e-9)


def test_gray_assignment_order():
    assert [DensePcrf._assignment(i, 2) for i in range(4)] == \
        [(0, 0), (1, 0), (1, 1), (0, 1)]


def test_rejects_bad_inputs(rng):
    n = 3
    e0, e1 = random_factors(rng, n, rank=2)
    t00, t11, t01, t10 = dense_from_factors(e0, e1)
    theta = np.zeros(n)

    bad00 = t00.copy()
    bad00[0, 1] += 1.0
    with pytest.raises(ValueError, match="not symmetric"):
        DensePcrf(theta, theta, bad00, t11, t01, t10)

    bad01 = t01.copy()
    bad01[0, 1] += 1.0
    with pytest.raises(ValueError, match="theta01"):
        DensePcrf(theta, theta, t00, t11, bad01, t10)

    with pytest.raises(ValueError, match="must be"):
        DensePcrf(theta, theta, t00[:2, :2], t11, t01, t10)

    big = MAX_VARIABLES + 1
    zeros = np.zeros((big, big))
    with pytest.raises(ValueError, match="capped"):
        DensePcrf(np.zeros(big), np.zeros(big), zeros, zeros, zeros, zeros)
