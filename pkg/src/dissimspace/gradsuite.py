"""Central-difference checks of every hand-written backward pass.

Each check draws a random point, rejects it if it sits within a small
distance of a kink (ReLU at 0, hinge at slack 0, a tie in batch-hard
selection, |a - b| at a = b), and reports the maximum relative error.
"""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import numeric as nm
from .dichotomizer import DichotomizerParams, MahalanobisParams, hinge_loss, mahalanobis_pair_loss
from .pairspace import PairBatch, dichotomy_backward, dichotomy_transform
from .trainer import Model, TrainConfig, compute_losses, triplet_loss_batch_hard

EPS = 1e-5
KINK_GAP = 1e-3
TOLERANCE = {"batchnorm": 1e-3}
DEFAULT_TOL = 1e-4


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + gap, x - gap)


def check_linear(rng):
    x, W, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5)
    R = rng.standard_normal((4, 5))
    out, cache = nm.linear_forward(x, W, b)
    dx, dW, db = nm.linear_backward(R, cache)
    f = lambda: float((nm.linear_forward(x, W, b)[0] * R).sum())
    return nm.finite_diff_gradcheck(f, [x, W, b], [dx, dW, db], EPS)


def check_relu(rng):
    x = _away_from_zero(rng, (6, 4))
    R = rng.standard_normal(x.shape)
    _, cache = nm.relu_forward(x)
    dx = nm.relu_backward(R, cache)
    f = lambda: float((nm.relu_forward(x)[0] * R).sum())
    return nm.finite_diff_gradcheck(f, [x], [dx], EPS)


def check_cross_entropy(rng):
    logits = rng.standard_normal((6, 5)) * 2
    labels = rng.integers(0, 5, 6)
    _, d = nm.softmax_cross_entropy(logits, labels)
    f = lambda: nm.softmax_cross_entropy(logits, labels)[0]
    return nm.finite_diff_gradcheck(f, [logits], [d], EPS)


def check_batchnorm(rng):
    x = rng.standard_normal((8, 4)) * rng.uniform(0.5, 2, 4) + rng.standard_normal(4)
    gamma, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
    R = rng.standard_normal(x.shape)
    _, cache = nm.batchnorm_forward(x, gamma, beta)
    dx, dg, db = nm.batchnorm_backward(R, cache)
    f = lambda: float((nm.batchnorm_forward(x, gamma, beta)[0] * R).sum())
    return nm.finite_diff_gradcheck(f, [x, gamma, beta], [dx, dg, db], EPS)


def check_dropout(rng):
    x = rng.standard_normal((6, 5))
    R = rng.standard_normal(x.shape)
    _, mask = nm.dropout_forward(x, 0.3, rng=rng)
    dx = nm.dropout_backward(R, mask)
    f = lambda: float((nm.dropout_forward(x, 0.3, mask=mask)[0] * R).sum())
    return nm.finite_diff_gradcheck(f, [x], [dx], EPS)


def check_dichotomy(rng):
    a = rng.standard_normal((5, 4))
    b = a + _away_from_zero(rng, a.shape)
    R = rng.standard_normal(a.shape)
    da, db = dichotomy_backward(R, a, b)
    f = lambda: float((dichotomy_transform(a, b) * R).sum())
    return nm.finite_diff_gradcheck(f, [a, b], [da, db], EPS)


def check_hinge(rng, **kw):
    n, N = 4, 10
    while True:
        params = DichotomizerParams(n, C=float(rng.uniform(0.5, 2)), **kw)
        params.W_c.value[...] = rng.standard_normal(n)
        params.b.value[...] = rng.standard_normal()
        u = np.abs(rng.standard_normal((N, n)))
        y = rng.choice([-1, 1], N)
        s = u @ params.W_c.value + params.b.value
        active = 1 - y * s > 0
        # an exactly cancelling bias gradient leaves only rounding noise to compare
        if np.min(np.abs(1 - y * s)) > KINK_GAP and abs(y[active].sum()) > 0:
            break
    params.W_c.zero_grad()
    params.b.zero_grad()
    _, du = hinge_loss(u, y, params)
    gW, gb = params.W_c.grad.copy(), params.b.grad.copy()
    f = lambda: hinge_loss(u, y, params)[0]
    return nm.finite_diff_gradcheck(f, [params.W_c.value, params.b.value, u], [gW, gb, du], EPS)


def _triplet_kink_distance(phi, labels, margin):
    B = len(labels)
    diff = phi[:, None, :] - phi[None, :, :]
    D = np.sqrt((diff ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    gaps = [np.min(D[~np.eye(B, dtype=bool)])]
    for a in range(B):
        pos = np.sort(D[a][same[a] & (np.arange(B) != a)])[::-1]
        neg = np.sort(D[a][~same[a]])
        if len(pos) == 0:
            continue
        if len(pos) > 1:
            gaps.append(pos[0] - pos[1])
        if len(neg) > 1:
            gaps.append(neg[1] - neg[0])
        gaps.append(abs(margin + pos[0] - neg[0]))
    return min(gaps)


def check_triplet(rng):
    labels = np.repeat(np.arange(3), 3)
    margin = 0.5
    while True:
        phi = rng.standard_normal((9, 4))
        if _triplet_kink_distance(phi, labels, margin) > KINK_GAP:
            break
    _, d = triplet_loss_batch_hard(phi, labels, margin)
    f = lambda: triplet_loss_batch_hard(phi, labels, margin)[0]
    return nm.finite_diff_gradcheck(f, [phi], [d], EPS)


def check_mahalanobis(rng):
    n, N = 3, 8
    params = MahalanobisParams(n)
    while True:
        params.L.value[...] = rng.standard_normal((n, n))
        q, g = rng.standard_normal((N, n)), rng.standard_normal((N, n))
        y = rng.choice([-1, 1], N)
        z = (q - g) @ params.L.value.T
        d2 = (z * z).sum(1)
        params.theta.value[...] = np.median(d2)
        slack = 1 - y * (params.theta.value - d2)
        if np.min(np.abs(slack)) > KINK_GAP and abs(y[slack > 0].sum()) > 0:
            break
    params.L.zero_grad()
    params.theta.zero_grad()
    _, dq, dg = mahalanobis_pair_loss(q, g, y, params)
    gL, gt = params.L.grad.copy(), params.theta.grad.copy()
    f = lambda: mahalanobis_pair_loss(q, g, y, params)[0]
    return nm.finite_diff_gradcheck(f, [params.L.value, params.theta.value, q, g],
                                    [gL, gt, dq, dg], EPS)


def _pipeline_kink_distance(model, x, labels, pairs, cfg):
    psi, caches = model.backbone.forward(x)
    gaps = [np.inf]
    for (lc, rc) in caches:
        if rc is not None:
            gaps.append(np.min(np.abs(rc)))
    z = psi @ model.adapter.W1.value.T
    gaps.append(np.min(np.abs(z)))
    phi = np.maximum(z, 0)
    q, g = phi[pairs.q], phi[pairs.g]
    live = (q > 0) | (g > 0)
    if live.any():
        gaps.append(np.min(np.abs(q - g)[live]))
    u = np.abs(q - g)
    s = u @ model.dichotomizer.W_c.value + model.dichotomizer.b.value
    slack = 1 - pairs.y * s
    gaps.append(np.min(np.abs(slack)))
    if pairs.y[slack > 0].sum() == 0:
        return 0.0
    gaps.append(_triplet_kink_distance(phi, labels, cfg.margin))
    return min(gaps)


def check_pipeline(rng, mode="end2end"):
    """The whole joint objective w.r.t. every trainable tensor."""
    labels = np.repeat(np.arange(3), 2)
    cfg = TrainConfig(mode=mode, hidden_dims=[6], d_embed=4, d_adapt=4, margin=0.3, C=0.5,
                      P=3, K=2)
    while True:
        model = Model(cfg, 5, 3, nm.make_rng(int(rng.integers(1 << 31))))
        model.dichotomizer.W_c.value[...] = rng.standard_normal(4)
        x = rng.standard_normal((6, 5)) * 2
        q, g = np.triu_indices(6, k=1)
        pairs = PairBatch(q, g, np.where(labels[q] == labels[g], 1, -1))
        if _pipeline_kink_distance(model, x, labels, pairs, cfg) > KINK_GAP:
            break
    for p in model.named_params().values():
        p.zero_grad()
    compute_losses(model, x, labels, cfg, pairs)
    params = model.trainable()
    grads = [p.grad.copy() for p in params]
    f = lambda: compute_losses(model, x, labels, cfg, pairs, backward=False).l_total
    return nm.finite_diff_gradcheck(f, [p.value for p in params], grads, EPS)


CHECKS: Dict[str, Callable] = {
    "linear": check_linear,
    "relu": check_relu,
    "cross_entropy": check_cross_entropy,
    "batchnorm": check_batchnorm,
    "dropout": check_dropout,
    "dichotomy": check_dichotomy,
    "hinge": check_hinge,
    "hinge_fixed_norm": lambda rng: check_hinge(rng, norm_regime="fixed_norm"),
    "triplet": check_triplet,
    "mahalanobis_pair": check_mahalanobis,
    "pipeline_total": check_pipeline,
}


def run_suite(seed: int = 0, trials: int = 20) -> Dict[str, dict]:
    """``{name: {"max_error", "tolerance", "passed"}}`` over ``trials`` draws."""
    rng = nm.make_rng(seed)
    report = {}
    for name, check in CHECKS.items():
        worst = max(check(rng) for _ in range(trials))
        tol = TOLERANCE.get(name, DEFAULT_TOL)
        report[name] = {"max_error": worst, "tolerance": tol, "passed": bool(worst < tol)}
    return report
