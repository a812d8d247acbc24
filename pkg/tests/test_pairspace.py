import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dissimspace.errors import PairSamplingError, ShapeError
from dissimspace.numeric import make_rng
from dissimspace.pairspace import (NEGATIVE, POSITIVE, count_pairs, dichotomy_backward,
                                   dichotomy_transform, enumerate_all_pairs,
                                   sample_balanced_pairs)


def brute_force_counts(K, R):
    labels = [k for k in range(K) for _ in range(R)]
    pos = neg = 0
    for i, j in itertools.combinations(range(len(labels)), 2):
        if labels[i] == labels[j]:
            pos += 1
        else:
            neg += 1
    return pos, neg


# -- transform ---------------------------------------------------------------

def test_transform_examples():
    assert dichotomy_transform([1.0, 2.0], [1.0, 2.0]).tolist() == [0.0, 0.0]
    assert dichotomy_transform([1.0, 2.0], [3.0, 0.0]).tolist() == [2.0, 2.0]


def test_transform_shape_mismatch():
    with pytest.raises(ShapeError):
        dichotomy_transform(np.ones((2, 3)), np.ones((2, 4)))


def test_backward_tie_gets_zero():
    dq, dg = dichotomy_backward(np.ones(3), np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 5.0]))
    assert dq.tolist() == [0.0, 1.0, -1.0]
    assert dg.tolist() == [0.0, -1.0, 1.0]


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite))
def test_transform_properties(abc):
    a, b, c = abc
    u = dichotomy_transform(a, b)
    assert np.all(u >= 0)
    assert np.array_equal(u, dichotomy_transform(b, a))
    assert np.array_equal(u == 0, a == b)
    # floating point rounding can add half an ulp to each side
    assert np.all(dichotomy_transform(a, c) <= (u + dichotomy_transform(b, c)) * (1 + 1e-15))


# -- counting ----------------------------------------------------------------

def test_count_examples():
    assert count_pairs(1, 2).as_dict() == {"total": 1, "positives": 1, "negatives": 0}
    assert count_pairs(2, 1).as_dict() == {"total": 1, "positives": 0, "negatives": 1}
    assert count_pairs(3, 4).as_dict() == {"total": 66, "positives": 18, "negatives": 48}


def test_count_k3_r4_by_enumeration():
    assert brute_force_counts(3, 4) == (18, 48)


@pytest.mark.parametrize("K,R", [(0, 3), (3, 0), (-1, 2)])
def test_count_rejects_empty(K, R):
    with pytest.raises(ValueError):
        count_pairs(K, R)


@given(st.integers(1, 20), st.integers(1, 20))
def test_count_identity(K, R):
    pc = count_pairs(K, R)
    assert pc.positives + pc.negatives == pc.total == comb(K * R, 2)


def test_count_matches_enumerate_all_pairs():
    labels = np.repeat(np.arange(3), 4)
    pb = enumerate_all_pairs(labels)
    pc = count_pairs(3, 4)
    assert (pb.n_positive, pb.n_negative, len(pb)) == (pc.positives, pc.negatives, pc.total)


def test_enumerate_small():
    assert enumerate_all_pairs(["a", "a"]).y.tolist() == [POSITIVE]
    assert enumerate_all_pairs(["a", "b"]).y.tolist() == [NEGATIVE]


# -- balanced sampling ----------------------------------------------------------

def test_sample_two_by_two():
    pb = sample_balanced_pairs([0, 0, 1, 1], 4, make_rng(0))
    assert pb.n_positive == 2 and pb.n_negative == 2


def test_sample_single_class():
    with pytest.raises(PairSamplingError, match="no negative pairs available"):
        sample_balanced_pairs([3, 3, 3], 4, make_rng(0))


def test_sample_all_singletons():
    with pytest.raises(PairSamplingError, match="no positive pairs available"):
        sample_balanced_pairs([0, 1, 2, 3], 4, make_rng(0))


def test_sample_odd_request():
    with pytest.raises(ValueError):
        sample_balanced_pairs([0, 0, 1, 1], 3, make_rng(0))


def test_sample_pk_batches_exhaustively():
    rng = make_rng(2024)
    labels = np.repeat(np.arange(8), 4)
    for _ in range(10_000):
        batch = labels[rng.permutation(32)]
        pb = sample_balanced_pairs(batch, 64, rng)
        assert np.all(pb.q != pb.g)
        expect = np.where(batch[pb.q] == batch[pb.g], POSITIVE, NEGATIVE)
        assert np.array_equal(pb.y, expect)
        assert pb.n_positive == 32


def test_sample_without_replacement_when_possible():
    # 8x4 has 48 positive pairs, so 32 can be distinct
    pb = sample_balanced_pairs(np.repeat(np.arange(8), 4), 64, make_rng(1))
    pos = {(int(q), int(g)) for q, g, y in zip(pb.q, pb.g, pb.y) if y == POSITIVE}
    assert len(pos) == 32
