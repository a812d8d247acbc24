"""Datasets: CSV ingestion, the synthetic generator, class-disjoint splits
and per-class subsampling."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError
from .numeric import make_rng

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.class_names:
            self.class_names = [str(c) for c in range(int(self.labels.max()) + 1)] if len(self.labels) else []

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(np.unique(self.labels))

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` with labels re-indexed densely in first-appearance order."""
        idx = np.asarray(idx, dtype=np.int64)
        old = self.labels[idx]
        mapping = {}
        for lab in old:
            mapping.setdefault(int(lab), len(mapping))
        new = np.array([mapping[int(l)] for l in old], dtype=np.int64)
        names = [self.class_names[o] for o in mapping]
        return Dataset(self.features[idx].copy(), new, names)


@dataclass
class SyntheticSpec:
    n_classes: int = 30
    n_per_class: int = 20
    dim: int = 32
    within_std: float = 1.0
    between_sep: float = 4.0
    seed: int = 0


@dataclass
class DatasetSpec:
    """Where data comes from plus how the class-disjoint split is made."""

    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    csv_path: Optional[str] = None
    label_column: str = "label"
    holdout_fraction: float = 1.0 / 3.0
    split_seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "DatasetSpec":
        d = dict(d)
        syn = SyntheticSpec(**d.pop("synthetic", {}))
        return cls(synthetic=syn, **d)

    def load(self) -> Dataset:
        if self.source == "synthetic":
            return generate_synthetic(self.synthetic)
        if self.source == "csv":
            if not self.csv_path:
                raise DataError("csv source needs a path")
            return load_csv(self.csv_path, self.label_column)
        raise DataError(f"unknown dataset source {self.source!r}")


def load_csv(path, label_column: str = "label") -> Dataset:
    """Header row required; every non-label column must be numeric."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataError(f"{path}: empty file (no header row)")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not found in header {header}")
    li = header.index(label_column)
    width = len(header)
    feats, labels, names, index = [], [], [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: ragged row with {len(row)} cells, header has {width}")
        vals = []
        for j, cell in enumerate(row):
            if j == li:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {header[j]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value {cell!r} in column {header[j]!r}")
            vals.append(v)
        lab = row[li].strip()
        if lab not in index:
            index[lab] = len(names)
            names.append(lab)
        labels.append(index[lab])
        feats.append(vals)
    if not feats:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels), names)


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    # repr() of a float round-trips exactly
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(dataset.dim)] + [label_column])
        for x, lab in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [dataset.class_names[lab]])


def generate_synthetic(spec: SyntheticSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Gaussian blobs whose centres lie uniformly on a sphere of radius
    ``between_sep``."""
    if spec.n_classes < 2 or spec.n_per_class < 2:
        raise DataError("synthetic data needs at least 2 classes and 2 samples per class")
    if spec.within_std < 0 or spec.dim < 1:
        raise DataError("within_std must be non-negative and dim positive")
    rng = rng or make_rng(spec.seed)
    centres = rng.standard_normal((spec.n_classes, spec.dim))
    centres *= spec.between_sep / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    noise = rng.standard_normal((len(labels), spec.dim)) * spec.within_std
    return Dataset(centres[labels] + noise, labels, [f"c{k}" for k in range(spec.n_classes)])


def split_by_class(dataset: Dataset, holdout_fraction: float, rng: np.random.Generator):
    """Returns ``(train, test)`` with disjoint class sets."""
    classes = np.unique(dataset.labels)
    n_test = int(round(len(classes) * holdout_fraction))
    if not 1 <= n_test < len(classes):
        raise DataError(f"holdout fraction {holdout_fraction} leaves an empty side "
                        f"of the split over {len(classes)} classes")
    perm = rng.permutation(classes)
    test_cls = set(perm[:n_test].tolist())
    is_test = np.array([int(l) in test_cls for l in dataset.labels])
    train = dataset.subset(np.flatnonzero(~is_test))
    test = dataset.subset(np.flatnonzero(is_test))
    assert not set(train.class_names) & set(test.class_names)
    return train, test


def subsample_per_class(dataset: Dataset, fraction: float, rng: np.random.Generator,
                        min_per_class: int = 2) -> Dataset:
    """Keep ``round(fraction * n_c)`` samples of every class; classes left
    with fewer than ``min_per_class`` are dropped."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    keep = []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        k = int(round(fraction * len(idx)))
        if k < min_per_class:
            log.warning("class %s dropped: %d sample(s) after subsampling", dataset.class_names[c], k)
            continue
        keep.append(np.sort(rng.choice(idx, size=k, replace=False)))
    if not keep:
        raise DataError("subsampling removed every class")
    return dataset.subset(np.concatenate(keep))
