import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aoept.errors import InputError, ShapeError
from aoept.nm2i import entropy, joint_distribution, marginals, mutual_information, nm2i, nm2i_from_joint


def _reference_nm2i(joint):
    """Plain-python NM2I from a nested-list joint."""
    K, J = len(joint), len(joint[0])
    pk = [sum(row) for row in joint]
    pj = [sum(joint[k][j] for k in range(K)) for j in range(J)]
    mi = sum(joint[k][j] * math.log(joint[k][j] / (pk[k] * pj[j]))
             for k in range(K) for j in range(J) if joint[k][j] > 0)
    h = lambda p: -sum(x * math.log(x) for x in p if x > 0)
    return mi / (0.5 * (h(pk) + h(pj)))


def test_two_by_two_hand_example():
    # <p_k, m_j> = [[0, 0], [0, ln 3]] so sigmoid gives [[.5, .5], [.5, .75]]
    P = np.array([[0.0], [1.0]])
    M = np.array([[0.0], [math.log(3)]])
    joint = joint_distribution(P, M)
    np.testing.assert_allclose(joint, np.array([[0.5, 0.5], [0.5, 0.75]]) / 2.25, rtol=1e-14)
    expected = _reference_nm2i((np.array([[0.5, 0.5], [0.5, 0.75]]) / 2.25).tolist())
    assert abs(nm2i(P, M) - expected) <= 1e-12
    assert 0 < expected < 0.01


def test_extremes():
    for n in (2, 3, 7):
        assert abs(nm2i_from_joint(np.eye(n) / n) - 1.0) <= 1e-9
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
        assert abs(nm2i_from_joint(np.outer(a, b))) <= 1e-9
    assert nm2i_from_joint(np.array([[1.0]])) == 0.0


def test_random_joints_are_bounded():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        K, J = rng.integers(1, 8, size=2)
        joint = rng.random((K, J)) ** 3
        joint /= joint.sum()
        pk, pj = marginals(joint)
        mi = mutual_information(joint)
        assert mi <= min(entropy(pk), entropy(pj)) + 1e-12
        assert 0.0 <= nm2i_from_joint(joint) <= 1.0


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.integers(0, 1000)))
def test_matches_plain_reference(raw):
    if raw.sum() == 0:
        return
    joint = raw / raw.sum()
    pk, pj = marginals(joint)
    if entropy(pk) + entropy(pj) == 0:
        assert nm2i_from_joint(joint) == 0.0
        return
    ref = min(max(_reference_nm2i(joint.tolist()), 0.0), 1.0)
    assert nm2i_from_joint(joint) == pytest.approx(ref, abs=1e-10)


def test_token_permutations_leave_score_unchanged():
    rng = np.random.default_rng(2)
    P, M = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
    base = nm2i(P, M)
    assert nm2i(P[rng.permutation(5)], M[rng.permutation(6)]) == pytest.approx(base, abs=1e-14)


def test_batched_equals_per_pair():
    rng = np.random.default_rng(3)
    P, M = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 5, 2))
    batched = nm2i_from_joint(joint_distribution(P, M))
    for i in range(3):
        assert batched[i] == pytest.approx(nm2i(P[i], M[i]), abs=1e-14)


def test_entropy_and_shape_errors():
    assert entropy([0.5, 0.5, 0.0]) == pytest.approx(math.log(2))
    with pytest.raises(InputError):
        entropy([1.5, -0.5])
    with pytest.raises(ShapeError):
        joint_distribution(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        joint_distribution(np.ones(3), np.ones((2, 3)))
