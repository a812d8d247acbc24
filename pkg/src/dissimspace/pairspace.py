"""Pair construction and the dichotomy transformation.

A pair of embeddings becomes one vector of elementwise absolute
differences; the K-class matching problem becomes a binary one
(within-class, label +1, versus between-class, label -1).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import PairSamplingError, ShapeError

POSITIVE = 1
NEGATIVE = -1


@dataclass(frozen=True)
class PairCount:
    total: int
    positives: int
    negatives: int

    def as_dict(self):
        return {"total": self.total, "positives": self.positives, "negatives": self.negatives}


@dataclass
class PairBatch:
    q: np.ndarray
    g: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def n_positive(self) -> int:
        return int((self.y == POSITIVE).sum())

    @property
    def n_negative(self) -> int:
        return int((self.y == NEGATIVE).sum())


def dichotomy_transform(phi_q, phi_g):
    phi_q = np.asarray(phi_q, dtype=np.float64)
    phi_g = np.asarray(phi_g, dtype=np.float64)
    if phi_q.shape != phi_g.shape:
        raise ShapeError(f"dichotomy transform: shapes {phi_q.shape} and {phi_g.shape} differ")
    return np.abs(phi_q - phi_g)


def dichotomy_backward(du, phi_q, phi_g):
    """Gradient into both inputs. Ties get subgradient 0."""
    s = np.sign(np.asarray(phi_q) - np.asarray(phi_g))
    return du * s, -du * s


def count_pairs(n_classes: int, refs_per_class: int) -> PairCount:
    K, R = int(n_classes), int(refs_per_class)
    if K < 1 or R < 1:
        raise ValueError(f"need at least one class and one reference, got K={K}, R={R}")
    pos = K * comb(R, 2)
    neg = comb(K, 2) * R * R
    return PairCount(total=comb(K * R, 2), positives=pos, negatives=neg)


def enumerate_all_pairs(labels) -> PairBatch:
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("need at least two samples to form a pair")
    q, g = np.triu_indices(n, k=1)
    y = np.where(labels[q] == labels[g], POSITIVE, NEGATIVE)
    return PairBatch(q.astype(np.int64), g.astype(np.int64), y.astype(np.int64))


def _draw(pool_q, pool_g, k, rng):
    replace = k > len(pool_q)
    sel = rng.choice(len(pool_q), size=k, replace=replace)
    return pool_q[sel], pool_g[sel]


def sample_balanced_pairs(labels, n_pairs: int, rng: np.random.Generator) -> PairBatch:
    """Half within-class, half between-class pairs drawn from one batch.

    Sampling is without replacement unless a pool is smaller than the
    request. Output order is shuffled.
    """
    if n_pairs <= 0 or n_pairs % 2:
        raise ValueError(f"pairs per batch must be a positive even number, got {n_pairs}")
    every = enumerate_all_pairs(labels)
    pos = every.y == POSITIVE
    if not pos.any():
        raise PairSamplingError("no positive pairs available: every class in the batch is a singleton")
    if pos.all():
        raise PairSamplingError("no negative pairs available: the batch holds a single class")
    half = n_pairs // 2
    pq, pg = _draw(every.q[pos], every.g[pos], half, rng)
    nq, ng = _draw(every.q[~pos], every.g[~pos], half, rng)
    q = np.concatenate([pq, nq])
    g = np.concatenate([pg, ng])
    y = np.concatenate([np.full(half, POSITIVE), np.full(half, NEGATIVE)])
    order = rng.permutation(n_pairs)
    return PairBatch(q[order], g[order], y[order].astype(np.int64))
