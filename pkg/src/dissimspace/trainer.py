"""Joint training: identity cross-entropy + batch-hard triplet + a pair
objective in dissimilarity space, in four modes.

Modes
-----
end2end               backbone, adapter, head and dichotomizer all learn
frozen_backbone       backbone and identity head fixed (normally loaded from a
                      baseline run); adapter and dichotomizer learn
euclid_baseline       no pair objective; retrieval by Euclidean distance
mahalanobis_baseline  pair objective is a learned full Mahalanobis metric
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

from .backbone import Adapter, Backbone, CeHead
from .data import Dataset
from .dichotomizer import (
    SOFT_L2,
    DichotomizerParams,
    MahalanobisParams,
    hinge_loss,
    mahalanobis_pair_loss,
)
from .errors import DataError, NumericalError
from .numeric import make_rng, sgd_momentum_step
from .pairspace import dichotomy_backward, dichotomy_transform, sample_balanced_pairs

log = logging.getLogger(__name__)

MODES = ("end2end", "frozen_backbone", "euclid_baseline", "mahalanobis_baseline")


@dataclass
class TrainConfig:
    mode: str = "end2end"
    epochs: int = 50
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    P: int = 8
    K: int = 4
    pairs_per_batch: int = 64
    margin: float = 0.2
    # the hinge is a sum over pairs; 1/pairs_per_batch keeps its scale that of a mean
    C: float = 1.0 / 64
    norm_regime: str = SOFT_L2
    tau: float = 1.0
    lambda_ce: float = 1.0
    lambda_tri: float = 1.0
    lambda_hinge: float = 1.0
    hidden_dims: List[int] = field(default_factory=lambda: [64])
    d_embed: int = 32
    d_adapt: int = 32
    # which embedding the CE/triplet terms see: "phi" (post-adapter) or "psi"
    metric_losses_on: str = "phi"
    classifier_bn: bool = False
    classifier_dropout: float = 0.0
    freeze_adapter: bool = False
    steps_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.P < 2 or self.K < 2:
            raise ValueError("PK batches need P >= 2 and K >= 2")
        if self.lr <= 0 or self.C <= 0 or self.margin < 0:
            raise ValueError("lr and C must be positive, margin non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.metric_losses_on not in ("phi", "psi"):
            raise ValueError("metric_losses_on must be 'phi' or 'psi'")
        self.hidden_dims = [int(h) for h in self.hidden_dims]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Model:
    def __init__(self, config: TrainConfig, d_input: int, n_train_classes: int,
                 rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else make_rng(config.seed)
        dims = [d_input, *config.hidden_dims, config.d_embed]
        self.backbone = Backbone(dims, rng)
        self.adapter = Adapter(config.d_embed, config.d_adapt, rng)
        head_in = config.d_adapt if config.metric_losses_on == "phi" else config.d_embed
        self.head = CeHead(head_in, n_train_classes, rng)
        self.dichotomizer = DichotomizerParams(
            config.d_adapt, C=config.C, norm_regime=config.norm_regime, tau=config.tau,
            use_bn=config.classifier_bn, dropout_p=config.classifier_dropout, rng=rng)
        self.mahalanobis = (MahalanobisParams(config.d_adapt)
                            if config.mode == "mahalanobis_baseline" else None)

    def named_params(self) -> Dict[str, object]:
        out = {}
        for i, (W, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            out[f"backbone.{i}.W"] = W
            out[f"backbone.{i}.b"] = b
        out["adapter.W1"] = self.adapter.W1
        out["head.W"] = self.head.W
        out["head.b"] = self.head.b
        out["dichotomizer.W_c"] = self.dichotomizer.W_c
        out["dichotomizer.b"] = self.dichotomizer.b
        if self.dichotomizer.bn is not None:
            out["dichotomizer.bn.gamma"] = self.dichotomizer.bn.gamma
            out["dichotomizer.bn.beta"] = self.dichotomizer.bn.beta
        if self.mahalanobis is not None:
            out["mahalanobis.L"] = self.mahalanobis.L
            out["mahalanobis.theta"] = self.mahalanobis.theta
        return out

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {k: p.value.copy() for k, p in self.named_params().items()}
        if self.dichotomizer.bn is not None:
            out["dichotomizer.bn.running_mean"] = self.dichotomizer.bn.running_mean.copy()
            out["dichotomizer.bn.running_var"] = self.dichotomizer.bn.running_var.copy()
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray], strict: bool = True):
        params = self.named_params()
        for name, p in params.items():
            if name not in tensors:
                if strict:
                    raise DataError(f"checkpoint lacks tensor {name!r}")
                continue
            if tensors[name].shape != p.value.shape:
                raise DataError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                f"model expects {p.value.shape}")
            p.value[...] = tensors[name]
        bn = self.dichotomizer.bn
        if bn is not None and "dichotomizer.bn.running_mean" in tensors:
            bn.running_mean[...] = tensors["dichotomizer.bn.running_mean"]
            bn.running_var[...] = tensors["dichotomizer.bn.running_var"]

    def trainable(self) -> List:
        mode = self.config.mode
        ps = []
        if mode != "frozen_backbone":
            ps += self.backbone.params
        if not (mode == "frozen_backbone" and self.config.freeze_adapter):
            ps += self.adapter.params
        if mode != "frozen_backbone":
            ps += self.head.params
        if mode in ("end2end", "frozen_backbone"):
            ps += self.dichotomizer.params
        if mode == "mahalanobis_baseline":
            ps += self.mahalanobis.params
        return ps

    def embed(self, x) -> np.ndarray:
        """Adapted embeddings phi (inference)."""
        psi, _ = self.backbone.forward(x)
        return self.adapter.forward(psi)[0]

    def metric_embed(self, x) -> np.ndarray:
        """The embedding the Euclidean scorer ranks with."""
        psi, _ = self.backbone.forward(x)
        if self.config.metric_losses_on == "psi":
            return psi
        return self.adapter.forward(psi)[0]


# -- batches and the triplet term ------------------------------------------------

def make_batch_pk(labels, P: int, K: int, rng: np.random.Generator):
    """``P`` distinct classes with ``K`` samples each, shuffled.

    Classes with fewer than ``K`` samples are drawn with replacement.
    Returns ``(indices, labels)``.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < P:
        raise DataError(f"batch needs {P} classes but the data has {len(classes)}")
    chosen = rng.choice(classes, size=P, replace=False)
    idx = []
    for c in chosen:
        pool = np.flatnonzero(labels == c)
        idx.append(rng.choice(pool, size=K, replace=len(pool) < K))
    idx = np.concatenate(idx)
    idx = idx[rng.permutation(len(idx))]
    return idx, labels[idx]


def _pairwise_dist(x):
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    # exact differences for the selected pairs are recomputed later
    return np.sqrt(d2)


def triplet_loss_batch_hard(phi, labels, margin: float):
    """Mean over anchors of ``max(0, m + d(a, hardest pos) - d(a, hardest neg))``.

    Anchors without any in-batch positive are skipped. Returns
    ``(loss, dphi)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.asarray(labels)
    B = len(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(B, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise DataError("triplet loss: no anchor has both a positive and a negative")
    D = _pairwise_dist(phi)
    hp = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    hn = np.argmin(np.where(neg_mask, D, np.inf), axis=1)
    anchors = np.flatnonzero(valid)
    p, n = hp[anchors], hn[anchors]
    dvec_p = phi[anchors] - phi[p]
    dvec_n = phi[anchors] - phi[n]
    d_ap = np.linalg.norm(dvec_p, axis=1)
    d_an = np.linalg.norm(dvec_n, axis=1)
    viol = margin + d_ap - d_an
    active = viol > 0
    loss = float(np.where(active, viol, 0.0).sum() / len(anchors))

    dphi = np.zeros_like(phi)
    w = active / len(anchors)
    with np.errstate(invalid="ignore", divide="ignore"):
        gp = np.where((d_ap > 0)[:, None], dvec_p / d_ap[:, None], 0.0) * w[:, None]
        gn = np.where((d_an > 0)[:, None], dvec_n / d_an[:, None], 0.0) * w[:, None]
    np.add.at(dphi, anchors, gp - gn)
    np.add.at(dphi, p, -gp)
    np.add.at(dphi, n, gn)
    return loss, dphi


# -- one step -----------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_ce: float
    l_tri: float
    l_hinge: float
    l_total: float

    def as_row(self):
        return (self.l_ce, self.l_tri, self.l_hinge, self.l_total)


def compute_losses(model: Model, x, labels, config: TrainConfig, pairs, dropout_rng=None,
                   dropout_mask=None, backward: bool = True) -> LossBreakdown:
    """Forward (and optionally backward) pass of the joint objective on a
    fixed batch and fixed pairs. Gradients are accumulated, not zeroed."""
    mode = config.mode
    psi, bcache = model.backbone.forward(x)
    phi, acache = model.adapter.forward(psi)
    dphi = np.zeros_like(phi)
    dpsi = np.zeros_like(psi)

    if config.metric_losses_on == "phi":
        metric_emb, dmetric = phi, dphi
    else:
        metric_emb, dmetric = psi, dpsi

    l_ce, l_tri, l_pair = 0.0, 0.0, 0.0
    if config.lambda_ce:
        l_ce, d = model.head.loss(metric_emb, labels)
        dmetric += config.lambda_ce * d
    if config.lambda_tri:
        l_tri, d = triplet_loss_batch_hard(metric_emb, labels, config.margin)
        dmetric += config.lambda_tri * d

    if config.lambda_hinge and mode != "euclid_baseline":
        q, g = phi[pairs.q], phi[pairs.g]
        if mode == "mahalanobis_baseline":
            l_pair, dq, dg = mahalanobis_pair_loss(q, g, pairs.y, model.mahalanobis)
        else:
            u = dichotomy_transform(q, g)
            l_pair, du = hinge_loss(u, pairs.y, model.dichotomizer, mode="train",
                                    rng=dropout_rng, mask=dropout_mask)
            dq, dg = dichotomy_backward(du, q, g)
        np.add.at(dphi, pairs.q, config.lambda_hinge * dq)
        np.add.at(dphi, pairs.g, config.lambda_hinge * dg)

    total = config.lambda_ce * l_ce + config.lambda_tri * l_tri + config.lambda_hinge * l_pair
    if backward:
        dpsi += model.adapter.backward(dphi, acache)
        if mode != "frozen_backbone":
            model.backbone.backward(dpsi, bcache)
    return LossBreakdown(l_ce, l_tri, l_pair, total)


def train_step(model: Model, dataset: Dataset, config: TrainConfig,
               rng: np.random.Generator, batch=None) -> LossBreakdown:
    """Draw a PK batch (unless given), build balanced pairs, take one
    optimiser step on the joint objective."""
    if batch is None:
        batch = make_batch_pk(dataset.labels, config.P, config.K, rng)
    idx, labels = batch
    pairs = sample_balanced_pairs(labels, config.pairs_per_batch, rng)
    params = model.trainable()
    for p in model.named_params().values():
        p.zero_grad()
    losses = compute_losses(model, dataset.features[idx], labels, config, pairs, dropout_rng=rng)
    if math.isfinite(losses.l_total):
        sgd_momentum_step(params, config.lr, config.momentum, config.weight_decay)
        if config.mode in ("end2end", "frozen_backbone"):
            model.dichotomizer.after_step()
    return losses


# -- checkpoints and the loop -----------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def build_model(self) -> Model:
        cfg = TrainConfig.from_dict(self.config)
        model = Model(cfg, self.meta["d_input"], self.meta["n_train_classes"], make_rng(0))
        model.load_tensors(self.tensors)
        return model


def snapshot(model: Model, epoch: int, rng: np.random.Generator, meta: dict) -> Checkpoint:
    return Checkpoint(config=model.config.to_dict(), tensors=model.state_tensors(), epoch=epoch,
                      rng_state=copy.deepcopy(rng.bit_generator.state), meta=dict(meta))


def train(dataset: Dataset, config: TrainConfig, init: Optional[Checkpoint] = None,
          meta: Optional[dict] = None):
    """Run ``config.epochs`` epochs. Returns ``(checkpoint, loss_log)`` where
    each log row is ``(epoch, l_ce, l_tri, l_hinge, l_total)`` averaged over
    the epoch's steps.

    ``init`` seeds every tensor the two models share (used to start the
    frozen-backbone mode from a trained baseline).
    """
    rng = make_rng(config.seed)
    model = Model(config, dataset.dim, dataset.n_classes, rng)
    if init is not None:
        model.load_tensors(init.tensors, strict=False)
    if model.mahalanobis is not None and (init is None or "mahalanobis.theta" not in init.tensors):
        # start the threshold at the median squared pair distance so the
        # pair classifier does not begin with every pair on one side
        phi = model.embed(dataset.features)
        sq = (phi * phi).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * phi @ phi.T
        iu = np.triu_indices(len(phi), k=1)
        model.mahalanobis.theta.value[...] = float(np.median(np.maximum(d2[iu], 0.0)))
    meta = dict(meta or {})
    meta.update(d_input=dataset.dim, n_train_classes=dataset.n_classes)
    steps = config.steps_per_epoch or max(1, math.ceil(len(dataset) / (config.P * config.K)))
    last_good = snapshot(model, 0, rng, meta)
    log_rows = []
    for epoch in range(1, config.epochs + 1):
        acc = np.zeros(4)
        for _ in range(steps):
            losses = train_step(model, dataset, config, rng)
            if not math.isfinite(losses.l_total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}: {losses}", last_good=last_good)
            acc += losses.as_row()
        row = (epoch, *(acc / steps))
        log_rows.append(row)
        log.debug("epoch %d  ce=%.4f tri=%.4f pair=%.4f total=%.4f", *row)
        last_good = snapshot(model, epoch, rng, meta)
    return last_good, log_rows


def write_loss_log(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,l_ce,l_tri,l_hinge,l_total\n")
        for r in rows:
            fh.write(f"{r[0]}," + ",".join(repr(float(v)) for v in r[1:]) + "\n")
