"""Slow, loop-based reference implementations used as independent oracles."""
import math

import numpy as np

from dissimspace.trainer import Model, TrainConfig

# four classes of three points in the positive quadrant; several exact
# distance ties so the index tie-break matters
HANDCRAFTED_POINTS = np.array([
    [1.0, 1.0], [1.0, 2.0], [2.0, 1.0],
    [4.0, 1.0], [5.0, 1.0], [4.0, 3.0],
    [1.0, 4.0], [2.0, 5.0], [3.0, 3.0],
    [5.0, 5.0], [6.0, 4.0], [3.0, 5.0],
])
HANDCRAFTED_LABELS = np.repeat(np.arange(4), 3)


def identity_model(W_c=(-1.0, -0.5), b=0.25, L=((1.0, 0.0), (0.5, 2.0))):
    """A model whose embedding is the identity on the positive quadrant."""
    cfg = TrainConfig(mode="mahalanobis_baseline", hidden_dims=[], d_embed=2, d_adapt=2)
    m = Model(cfg, 2, 4)
    m.backbone.weights[0].value[...] = np.eye(2)
    m.adapter.W1.value[...] = np.eye(2)
    m.dichotomizer.W_c.value[...] = W_c
    m.dichotomizer.b.value[...] = b
    m.mahalanobis.L.value[...] = L
    return m


def oracle_score(scorer, a, b, model):
    if scorer == "euclid":
        return -math.dist(a, b)
    if scorer == "dissim_svm":
        W, bias = model.dichotomizer.W_c.value, float(model.dichotomizer.b.value)
        return sum(W[i] * abs(a[i] - b[i]) for i in range(len(a))) + bias
    L = model.mahalanobis.L.value
    total = 0.0
    for r in range(L.shape[0]):
        z = sum(L[r, c] * (a[c] - b[c]) for c in range(len(a)))
        total += z * z
    return -total


def oracle_recall(points, labels, ks, scorer, model):
    n = len(points)
    hits = {k: 0 for k in ks}
    counted = 0
    for q in range(n):
        gallery = [g for g in range(n) if g != q]
        if not any(labels[g] == labels[q] for g in gallery):
            continue
        counted += 1
        ranked = sorted(gallery, key=lambda g: (-oracle_score(scorer, points[q], points[g], model), g))
        for k in ks:
            if any(labels[g] == labels[q] for g in ranked[:k]):
                hits[k] += 1
    return {k: hits[k] / counted for k in ks}
