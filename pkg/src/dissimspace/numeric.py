"""Layer primitives with hand-written forward/backward passes.

Every layer comes as a ``*_forward`` returning ``(out, cache)`` and a
``*_backward`` taking ``(dout, cache)``. Arrays are float64 numpy arrays
throughout; nothing here builds a graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; draw sequences are fixed for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class Param:
    """A trainable tensor with its gradient and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    buf: np.ndarray = field(default=None, repr=False)
    trainable: bool = True

    def __post_init__(self):
        self.value = as_f64(self.value).copy()
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.buf is None:
            self.buf = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# -- linear -----------------------------------------------------------------

def linear_forward(x, W, b=None):
    x = as_f64(x)
    W = as_f64(W)
    if x.ndim != 2 or W.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and W, got {x.shape} and {W.shape}")
    if x.shape[1] != W.shape[1]:
        raise ShapeError(
            f"linear: input has {x.shape[1]} features but weights expect {W.shape[1]}"
        )
    out = x @ W.T
    if b is not None:
        b = as_f64(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        out = out + b
    return out, (x, W, b is not None)


def linear_backward(dout, cache):
    """Returns ``(dx, dW, db)``; ``db`` is None for a bias-free layer."""
    x, W, has_bias = cache
    dx = dout @ W
    dW = dout.T @ x
    db = dout.sum(axis=0) if has_bias else None
    return dx, dW, db


# -- relu -------------------------------------------------------------------

def relu_forward(x):
    x = as_f64(x)
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


# -- softmax cross-entropy ----------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits = as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K}): {labels.min()}..{labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(B)
    loss = -log_p[rows, labels].mean()
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    return float(loss), dlogits


# -- batch norm -------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "BatchNormState":
        return cls(Param(np.ones(dim)), Param(np.zeros(dim)), np.zeros(dim), np.ones(dim))


def batchnorm_forward(x, gamma, beta, state: Optional[BatchNormState] = None,
                      mode: str = "train", eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM):
    """Per-feature normalisation. In train mode the running statistics on
    ``state`` (if given) are updated in place."""
    x = as_f64(x)
    gamma = as_f64(gamma)
    beta = as_f64(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if state is not None:
            state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mu
            state.running_var[...] = momentum * state.running_var + (1 - momentum) * var
    elif mode == "eval":
        if state is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "eval":
        return dxhat * inv_std, dgamma, dbeta
    B = dout.shape[0]
    dx = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# -- dropout ----------------------------------------------------------------

def dropout_forward(x, p: float, mode: str = "train", rng: Optional[np.random.Generator] = None,
                    mask: Optional[np.ndarray] = None):
    """Inverted dropout. ``mask`` (already scaled) may be supplied to replay
    a previous draw."""
    x = as_f64(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x.copy(), None
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- optimiser --------------------------------------------------------------

def sgd_momentum_step(params: Iterable[Param], lr: float, momentum: float = 0.0,
                      weight_decay: float = 0.0) -> None:
    for p in params:
        if not p.trainable:
            continue
        p.buf[...] = momentum * p.buf + p.grad + weight_decay * p.value
        p.value -= lr * p.buf


# -- gradient checking --------------------------------------------------------

def finite_diff_gradcheck(f: Callable[[], float], arrays: Sequence[np.ndarray],
                          analytic: Sequence[np.ndarray], eps: float = 1e-5,
                          max_coords: Optional[int] = None,
                          rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``f`` is re-evaluated after perturbing entries of ``arrays`` in place,
    so it must read those very arrays. With ``max_coords`` only that many
    coordinates per array are sampled.
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        if arr.shape != np.shape(grad):
            raise ShapeError(f"gradient shape {np.shape(grad)} != parameter shape {arr.shape}")
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            rng = rng or make_rng(0)
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        g = np.asarray(grad, dtype=np.float64).reshape(-1)
        for k in flat_idx:
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = f()
            arr[idx] = orig - eps
            fm = f()
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("objective is not finite at a perturbed point")
            num = (fp - fm) / (2 * eps)
            err = abs(g[k] - num) / max(1e-8, abs(g[k]) + abs(num))
            worst = max(worst, err)
    return worst
