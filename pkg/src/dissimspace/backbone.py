"""Feature extractor, adapter layer and identity-classification head."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .errors import ShapeError
from .numeric import (
    Param,
    glorot_uniform,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)


class Backbone:
    """Stack of linear layers with ReLU between them (none after the last).

    ``layer_dims`` lists ``(d_input, hidden..., d_embed)``.
    """

    def __init__(self, layer_dims: Sequence[int], rng: np.random.Generator = None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2:
            raise ValueError("backbone needs at least one layer")
        if layer_dims[-1] < 2:
            raise ValueError("embedding dimension must be at least 2")
        self.layer_dims = layer_dims
        self.weights: List[Param] = []
        self.biases: List[Param] = []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            W = glorot_uniform(rng, d_out, d_in) if rng is not None else np.zeros((d_out, d_in))
            self.weights.append(Param(W))
            self.biases.append(Param(np.zeros(d_out)))

    @property
    def params(self) -> List[Param]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ShapeError(
                f"backbone expects inputs of width {self.layer_dims[0]}, got shape {x.shape}"
            )
        caches = []
        h = x
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h, lc = linear_forward(h, W.value, b.value)
            rc = None
            if i < n - 1:
                h, rc = relu_forward(h)
            caches.append((lc, rc))
        return h, caches

    def backward(self, dpsi, caches):
        """Accumulates into parameter grads and returns the input gradient."""
        d = dpsi
        for i in reversed(range(len(self.weights))):
            lc, rc = caches[i]
            if rc is not None:
                d = relu_backward(d, rc)
            d, dW, db = linear_backward(d, lc)
            self.weights[i].grad += dW
            self.biases[i].grad += db
        return d


class Adapter:
    """phi = ReLU(W1 psi), no bias."""

    def __init__(self, d_embed: int, d_adapt: int, rng: np.random.Generator = None):
        W = glorot_uniform(rng, d_adapt, d_embed) if rng is not None else np.eye(d_adapt, d_embed)
        self.W1 = Param(W)

    @property
    def params(self) -> List[Param]:
        return [self.W1]

    def forward(self, psi):
        z, lc = linear_forward(psi, self.W1.value)
        phi, rc = relu_forward(z)
        return phi, (lc, rc)

    def backward(self, dphi, cache):
        lc, rc = cache
        dz = relu_backward(dphi, rc)
        dpsi, dW, _ = linear_backward(dz, lc)
        self.W1.grad += dW
        return dpsi


class CeHead:
    """Linear K-way classifier over adapted embeddings."""

    def __init__(self, d_in: int, n_classes: int, rng: np.random.Generator = None):
        W = glorot_uniform(rng, n_classes, d_in) if rng is not None else np.zeros((n_classes, d_in))
        self.W = Param(W)
        self.b = Param(np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def params(self) -> List[Param]:
        return [self.W, self.b]

    def loss(self, phi, labels):
        """Cross-entropy over the head logits. Accumulates head grads and
        returns ``(loss, dphi)``."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(
                f"label index outside the {self.n_classes} training classes"
            )
        logits, lc = linear_forward(phi, self.W.value, self.b.value)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        dphi, dW, db = linear_backward(dlogits, lc)
        self.W.grad += dW
        self.b.grad += db
        return loss, dphi


def embed(x, backbone: Backbone) -> np.ndarray:
    return backbone.forward(x)[0]


def adapt(psi, adapter: Adapter) -> np.ndarray:
    return adapter.forward(psi)[0]


def ce_loss(phi, labels, head: CeHead):
    return head.loss(phi, labels)
