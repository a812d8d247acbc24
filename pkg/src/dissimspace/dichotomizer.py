"""Max-margin classifier over dissimilarity vectors, plus the Mahalanobis
objects it is compared against.

Scores follow the convention "larger means more alike": within-class
vectors sit near the origin, so a trained ``W_c`` tends to be negative.
"""
from __future__ import annotations

import warnings
from typing import List, Optional

import numpy as np

from .errors import ShapeError
from .numeric import (
    BatchNormState,
    Param,
    batchnorm_backward,
    batchnorm_forward,
    dropout_backward,
    dropout_forward,
)

SOFT_L2 = "soft_l2"
FIXED_NORM = "fixed_norm"


class DichotomizerParams:
    def __init__(self, n: int, C: float = 1.0, norm_regime: str = SOFT_L2, tau: float = 1.0,
                 use_bn: bool = False, dropout_p: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        if C <= 0:
            raise ValueError("hinge penalty C must be positive")
        if norm_regime not in (SOFT_L2, FIXED_NORM):
            raise ValueError(f"unknown norm regime {norm_regime!r}")
        if norm_regime == FIXED_NORM and tau <= 0:
            raise ValueError("fixed-norm radius must be positive")
        self.n = int(n)
        self.C = float(C)
        self.norm_regime = norm_regime
        self.tau = float(tau)
        self.dropout_p = float(dropout_p)
        # Start pointing at "closer means same class"; every direction is
        # equally uninformative otherwise, and a zero vector breaks fixed-norm.
        w0 = -np.ones(self.n) / np.sqrt(self.n)
        if rng is not None:
            w0 = w0 + 0.01 * rng.standard_normal(self.n)
        if norm_regime == FIXED_NORM:
            w0 = fixed_norm_project(w0, self.tau)
        self.W_c = Param(w0)
        self.b = Param(np.array(0.0))
        self.bn = BatchNormState.create(self.n) if use_bn else None

    @property
    def params(self) -> List[Param]:
        ps = [self.W_c, self.b]
        if self.bn is not None:
            ps += [self.bn.gamma, self.bn.beta]
        return ps

    def after_step(self):
        if self.norm_regime == FIXED_NORM:
            self.W_c.value[...] = fixed_norm_project(self.W_c.value, self.tau)


def _score_forward(u, params: DichotomizerParams, mode="eval", rng=None, mask=None):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != params.n:
        raise ShapeError(f"decision score expects (B, {params.n}) inputs, got {u.shape}")
    h, bn_cache = u, None
    if params.bn is not None:
        h, bn_cache = batchnorm_forward(h, params.bn.gamma.value, params.bn.beta.value,
                                        params.bn, mode=mode)
    h, mask = dropout_forward(h, params.dropout_p, mode=mode, rng=rng, mask=mask)
    s = h @ params.W_c.value + params.b.value
    return s, (h, bn_cache, mask)


def _score_backward(ds, params: DichotomizerParams, cache):
    h, bn_cache, mask = cache
    params.W_c.grad += h.T @ ds
    params.b.grad += ds.sum()
    dh = np.outer(ds, params.W_c.value)
    dh = dropout_backward(dh, mask)
    if bn_cache is not None:
        dh, dgamma, dbeta = batchnorm_backward(dh, bn_cache)
        params.bn.gamma.grad += dgamma
        params.bn.beta.grad += dbeta
    return dh


def decision_score(u, params: DichotomizerParams, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _score_forward(u, params, mode=mode, rng=rng)[0]


def predict(scores) -> np.ndarray:
    """+1 (within-class) where the score is >= 0, else -1."""
    return np.where(np.asarray(scores) >= 0, 1, -1)


def _check_labels(y):
    y = np.asarray(y)
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("pair labels must be +1 or -1")
    return y.astype(np.float64)


def hinge_loss(u, y, params: DichotomizerParams, mode: str = "train",
               rng: Optional[np.random.Generator] = None, mask=None):
    """Soft-margin objective ``1/2 |W_c|^2 + C sum max(0, 1 - y s)``.

    Under the fixed-norm regime the norm term is dropped (the norm is held
    by projection instead). Accumulates parameter grads and returns
    ``(loss, du)``.
    """
    y = _check_labels(y)
    s, cache = _score_forward(u, params, mode=mode, rng=rng, mask=mask)
    if s.shape != y.shape:
        raise ShapeError(f"{len(s)} scores but {len(y)} labels")
    slack = 1.0 - y * s
    active = slack > 0
    loss = params.C * slack[active].sum()
    if params.norm_regime == SOFT_L2:
        loss += 0.5 * float(params.W_c.value @ params.W_c.value)
        params.W_c.grad += params.W_c.value
    ds = np.where(active, -params.C * y, 0.0)
    du = _score_backward(ds, params, cache)
    return float(loss), du


def fixed_norm_project(w, tau: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("cannot rescale a zero weight vector; reinitialise it")
    return w * (tau / norm)


# -- Mahalanobis --------------------------------------------------------------

def diag_mahalanobis_distance(x, y, w, strict: bool = True) -> float:
    """Squared distance ``sum w_i (x_i - y_i)^2``, i.e. ``|diag(sqrt w)(x - y)|^2``.

    Negative weights have no real square root. ``strict`` rejects them;
    otherwise their magnitudes are used and a warning is issued.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (x.shape == y.shape == w.shape):
        raise ShapeError(f"shapes {x.shape}, {y.shape}, {w.shape} do not match")
    if np.any(w < 0):
        if strict:
            raise ValueError("negative weight has no real square root")
        warnings.warn("negative weights replaced by their magnitudes", RuntimeWarning)
        w = np.abs(w)
    d = x - y
    return float(np.sum(w * d * d))


class MahalanobisParams:
    """``M = L^T L`` parametrised through ``L``, plus a threshold on the
    squared distance for the pair classifier."""

    def __init__(self, n: int, theta: float = 1.0):
        self.L = Param(np.eye(n))
        self.theta = Param(np.array(float(theta)))

    @property
    def n(self) -> int:
        return self.L.shape[1]

    @property
    def params(self) -> List[Param]:
        return [self.L, self.theta]

    @property
    def M(self) -> np.ndarray:
        return self.L.value.T @ self.L.value


def full_mahalanobis_distance(x, y, params: MahalanobisParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.shape != (params.n,):
        raise ShapeError(f"expected vectors of length {params.n}, got {x.shape} and {y.shape}")
    z = params.L.value @ (x - y)
    return float(z @ z)


def mahalanobis_sq_dists(phi_q, phi_g, L) -> np.ndarray:
    """Row-wise ``|L (q_i - g_i)|^2``."""
    z = (np.asarray(phi_q) - np.asarray(phi_g)) @ np.asarray(L).T
    return np.einsum("ij,ij->i", z, z)


def mahalanobis_pair_loss(phi_q, phi_g, y, params: MahalanobisParams):
    """Mean of ``max(0, 1 - y (theta - d^2))`` over pairs.

    Accumulates grads into ``L`` and ``theta``; returns
    ``(loss, dphi_q, dphi_g)``.
    """
    y = _check_labels(y)
    phi_q = np.asarray(phi_q, dtype=np.float64)
    phi_g = np.asarray(phi_g, dtype=np.float64)
    if phi_q.shape != phi_g.shape or phi_q.shape[1] != params.n:
        raise ShapeError(f"pair shapes {phi_q.shape}/{phi_g.shape} vs metric size {params.n}")
    N = len(y)
    delta = phi_q - phi_g
    z = delta @ params.L.value.T
    d2 = np.einsum("ij,ij->i", z, z)
    slack = 1.0 - y * (params.theta.value - d2)
    active = slack > 0
    loss = slack[active].sum() / N
    # d loss / d d2 = y/N on active pairs, d loss / d theta = -y/N
    g = np.where(active, y / N, 0.0)
    params.theta.grad += -g.sum()
    dz = 2.0 * g[:, None] * z
    params.L.grad += dz.T @ delta
    ddelta = dz @ params.L.value
    return float(loss), ddelta, -ddelta
