"""Open-set retrieval evaluation, the data-size ablation and 2-D PCA
projections."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, subsample_per_class
from .dichotomizer import decision_score, mahalanobis_sq_dists
from .errors import DataError
from .numeric import make_rng
from .pairspace import NEGATIVE, POSITIVE, dichotomy_transform, enumerate_all_pairs
from .trainer import train

log = logging.getLogger(__name__)

SCORERS = ("euclid", "dissim_svm", "mahalanobis")


@dataclass
class RetrievalResult:
    recall_at: Dict[int, float]
    first_hit_rank: List[Optional[int]]
    scorer: str
    skipped: int = 0

    def to_dict(self):
        return {
            "scorer": self.scorer,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "skipped_queries": self.skipped,
            "first_hit_rank": self.first_hit_rank,
        }


def score_matrix(emb, scorer: str, model=None, block: int = 256) -> np.ndarray:
    """Similarity matrix, larger = more alike. Distances are negated so every
    scorer ranks in descending order."""
    emb = np.asarray(emb, dtype=np.float64)
    N = len(emb)
    if scorer == "euclid":
        diff = emb[:, None, :] - emb[None, :, :]
        return -np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = np.empty((N, N))
    for start in range(0, N, block):
        rows = emb[start:start + block]
        q = np.repeat(rows, N, axis=0)
        g = np.tile(emb, (len(rows), 1))
        if scorer == "dissim_svm":
            s = decision_score(dichotomy_transform(q, g), model.dichotomizer, mode="eval")
        elif scorer == "mahalanobis":
            if model.mahalanobis is None:
                raise ValueError("model has no Mahalanobis metric")
            s = -mahalanobis_sq_dists(q, g, model.mahalanobis.L.value)
        else:
            raise ValueError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
        out[start:start + len(rows)] = s.reshape(len(rows), N)
    return out


def recall_from_scores(scores, labels, ks: Sequence[int], scorer: str = "custom") -> RetrievalResult:
    """Each query ranks every other item by descending score, ties going to
    the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    N = len(labels)
    if N == 0:
        raise DataError("empty test set")
    ranks: List[Optional[int]] = []
    skipped = 0
    for i in range(N):
        gallery = np.delete(np.arange(N), i)
        if not np.any(labels[gallery] == labels[i]):
            ranks.append(None)
            skipped += 1
            continue
        order = gallery[np.argsort(-scores[i, gallery], kind="stable")]
        ranks.append(int(np.flatnonzero(labels[order] == labels[i])[0]) + 1)
    hits = np.array([r for r in ranks if r is not None])
    denom = max(len(hits), 1)
    recall = {int(k): float((hits <= k).sum() / denom) for k in ks}
    return RetrievalResult(recall, ranks, scorer, skipped)


def recall_at_k(dataset: Dataset, ks: Sequence[int], scorer: str, model) -> RetrievalResult:
    if len(dataset) == 0:
        raise DataError("empty test set")
    emb = model.metric_embed(dataset.features) if scorer == "euclid" else model.embed(dataset.features)
    res = recall_from_scores(score_matrix(emb, scorer, model), dataset.labels, ks, scorer)
    if res.skipped:
        log.warning("%d queries skipped: their class has no other test sample", res.skipped)
    return res


# -- data-size ablation -------------------------------------------------------------

@dataclass
class AblationRow:
    fraction: float
    scorer: str
    median_r1: float
    delta: float
    per_seed: List[float] = field(default_factory=list)


def ablate_datasize(train_set: Dataset, test_set: Dataset, base_config,
                    fractions=(1.0, 0.5, 0.25), seeds=(0, 1, 2, 3, 4)) -> List[AblationRow]:
    """Train the dissimilarity pipeline and the Euclidean baseline on the
    same per-class subsample for every (fraction, seed); report median R@1
    and delta = dissim - euclid."""
    rows = []
    for frac in fractions:
        r_dis, r_euc = [], []
        for seed in seeds:
            sub = train_set if frac == 1.0 else subsample_per_class(
                train_set, frac, make_rng(10_000 + seed))
            for mode, scorer, bucket in (("end2end", "dissim_svm", r_dis),
                                         ("euclid_baseline", "euclid", r_euc)):
                cfg = replace(base_config, mode=mode, seed=seed)
                ckpt, _ = train(sub, cfg)
                bucket.append(recall_at_k(test_set, [1], scorer, ckpt.build_model()).recall_at[1])
        md, me = float(np.median(r_dis)), float(np.median(r_euc))
        rows.append(AblationRow(frac, "dissim_svm", md, md - me, r_dis))
        rows.append(AblationRow(frac, "euclid", me, md - me, r_euc))
    return rows


# -- PCA ------------------------------------------------------------------------

@dataclass
class ProjectionExport:
    coords: np.ndarray
    axes: np.ndarray
    eigenvalues: np.ndarray
    degenerate: bool
    kinds: List[str] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("x,y,kind,label\n")
            for (x, y), k, l in zip(self.coords, self.kinds, self.labels):
                fh.write(f"{float(x)!r},{float(y)!r},{k},{l}\n")


def _power_iteration(A, v0, tol=1e-10, max_iter=10_000):
    v = v0 / np.linalg.norm(v0)
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return v, 0.0
        w /= nw
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            break
        v = w
    return v, float(v @ A @ v)


def _orthogonal_unit(axis):
    """First standard basis vector not parallel to ``axis``, orthogonalised."""
    for j in range(len(axis)):
        e = np.zeros(len(axis))
        e[j] = 1.0
        e -= (e @ axis) * axis
        n = np.linalg.norm(e)
        if n > 1e-6:
            return e / n
    raise ValueError("cannot find an orthogonal direction")


def pca_project_2d(points, kinds=None, labels=None, tol=1e-10, max_iter=10_000,
                   seed: int = 0) -> ProjectionExport:
    """Top-2 principal axes by power iteration with deflation."""
    X = np.asarray(points, dtype=np.float64)
    N, d = X.shape
    if N < 3 or d < 2:
        raise ValueError(f"need at least 3 points in at least 2 dimensions, got {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (N - 1)
    rng = make_rng(seed)
    scale = max(float(np.trace(cov)), 1e-300)
    degenerate = False
    axes, eigs = [], []
    A = cov.copy()
    for _ in range(2):
        v, lam = _power_iteration(A, rng.standard_normal(d), tol, max_iter)
        for a in axes:
            v -= (v @ a) * a
        if lam <= 1e-12 * scale or np.linalg.norm(v) < 1e-6:
            degenerate = True
            v = _orthogonal_unit(axes[0]) if axes else np.eye(d)[0]
            lam = float(v @ cov @ v)
        v /= np.linalg.norm(v)
        axes.append(v)
        eigs.append(lam)
        A = A - lam * np.outer(v, v)
    W = np.stack(axes, axis=1)
    coords = Xc @ W
    return ProjectionExport(coords, W, np.array(eigs), degenerate,
                            list(kinds) if kinds is not None else ["embedding"] * N,
                            [str(l) for l in labels] if labels is not None else [""] * N)


def projection_points(model, dataset: Dataset, max_pairs: int = 2000, seed: int = 0,
                      space: str = "dissim"):
    """Points for a 2-D figure: either the embeddings themselves or
    dissimilarity vectors of (subsampled) within/between-class pairs."""
    emb = model.embed(dataset.features)
    if space == "embedding":
        return emb, ["embedding"] * len(emb), [dataset.class_names[l] for l in dataset.labels]
    pairs = enumerate_all_pairs(dataset.labels)
    rng = make_rng(seed)
    pos = np.flatnonzero(pairs.y == POSITIVE)
    neg = np.flatnonzero(pairs.y == NEGATIVE)
    half = max_pairs // 2
    pos = rng.choice(pos, size=min(half, len(pos)), replace=False)
    neg = rng.choice(neg, size=min(half, len(neg)), replace=False)
    sel = np.sort(np.concatenate([pos, neg]))
    u = dichotomy_transform(emb[pairs.q[sel]], emb[pairs.g[sel]])
    kinds = ["within" if y == POSITIVE else "between" for y in pairs.y[sel]]
    labels = ["+1" if y == POSITIVE else "-1" for y in pairs.y[sel]]
    return u, kinds, labels
