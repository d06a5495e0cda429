"""Synthetic datasets, CSV ingestion, label noise, batching, and splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Matrix, RngState

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer labels, and a train/val/test row partition."""

    features: Matrix
    labels: np.ndarray          # shape (N,), values in [0, class_count)
    class_count: int
    split_codes: np.ndarray     # shape (N,), 0=train 1=val 2=test
    label_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        n = self.features.rows
        if self.labels.shape != (n,) or self.split_codes.shape != (n,):
            raise ValueError("labels and split tags must have one entry per row")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.class_count:
            raise ValueError("labels out of range for class_count")

    @property
    def n(self) -> int:
        return self.features.rows

    @property
    def dim(self) -> int:
        return self.features.cols

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split_codes == _SPLIT_CODE[split])

    def split_features(self, split: str) -> Matrix:
        return Matrix._wrap(self.features.a[self.indices(split)])

    def split_labels(self, split: str) -> np.ndarray:
        return self.labels[self.indices(split)]


@dataclass(frozen=True)
class NoiseSpec:
    """Symmetric label corruption: each training label flips with
    probability theta to a uniformly random different class."""

    theta: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0, 1]")


def _stratified_splits(labels: np.ndarray, rng: RngState) -> np.ndarray:
    """70/15/15 per-class assignment, deterministic given the rng."""
    codes = np.zeros(len(labels), dtype=np.int64)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_train = int(round(0.70 * n))
        n_val = int(round(0.15 * n))
        codes[idx[:n_train]] = 0
        codes[idx[n_train:n_train + n_val]] = 1
        codes[idx[n_train + n_val:]] = 2
    return codes


def gen_blobs(class_count: int, per_class: int, dim: int, separation: float,
              rng: RngState) -> Dataset:
    """Gaussian clusters with centers at mutual distance >= separation.

    Centers are drawn and rescaled so the minimum pairwise distance equals
    the requested separation exactly (all clusters coincide at zero).
    """
    if class_count < 2 or dim < 1:
        raise ValueError("gen_blobs: needs class_count >= 2 and dim >= 1")
    while True:
        centers = rng.normal(class_count, dim).a
        diffs = centers[:, None, :] - centers[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(axis=2))
        d_min = dists[np.triu_indices(class_count, 1)].min()
        if d_min > 0:
            break
    centers = centers * (separation / d_min)
    features = np.vstack([centers[k] + rng.normal(per_class, dim).a
                          for k in range(class_count)])
    labels = np.repeat(np.arange(class_count), per_class)
    codes = _stratified_splits(labels, rng)
    return Dataset(Matrix._wrap(features), labels, class_count, codes)


def gen_spirals(arms: int, per_arm: int, noise_std: float, rng: RngState) -> Dataset:
    """Interleaved 2-D spiral arms; a nonlinear task that rewards depth.

    Each arm sweeps 1.5 pi radians starting from a nonzero inner radius, so
    with zero noise the arms are disjoint curves.
    """
    if arms < 2:
        raise ValueError("gen_spirals: needs at least 2 arms")
    t = (np.arange(per_arm) + 0.5) / per_arm
    radius = 0.15 + 0.85 * t
    rows = []
    for k in range(arms):
        theta = 2.0 * np.pi * k / arms + 1.5 * np.pi * t
        arm = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        if noise_std > 0:
            arm = arm + rng.normal(per_arm, 2, 0.0, noise_std).a
        rows.append(arm)
    features = np.vstack(rows)
    labels = np.repeat(np.arange(arms), per_arm)
    codes = _stratified_splits(labels, rng)
    return Dataset(Matrix._wrap(features), labels, arms, codes)


def load_csv(path: str, label_column, has_header: bool = True,
             split_rng: Optional[RngState] = None) -> Dataset:
    """Parse a numeric-feature CSV; string labels map to indices in
    first-appearance order. Rows get a deterministic stratified split."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if has_header:
        if not rows:
            raise ValueError(f"{path}: empty file")
        header, rows = rows[0], rows[1:]
        if isinstance(label_column, str):
            if label_column not in header:
                raise ValueError(f"{path}: no column named {label_column!r}")
            label_idx = header.index(label_column)
        else:
            label_idx = int(label_column)
        names = header
    else:
        label_idx = int(label_column)
        names = None
    if not rows:
        raise ValueError(f"{path}: no data rows")

    features, raw_labels = [], []
    for line_no, row in enumerate(rows, start=2 if has_header else 1):
        if len(row) <= label_idx:
            raise ValueError(f"{path}:{line_no}: row has {len(row)} fields, "
                             f"label column is {label_idx}")
        feat = []
        for j, cell in enumerate(row):
            if j == label_idx:
                continue
            try:
                feat.append(float(cell))
            except ValueError:
                col = names[j] if names else str(j)
                raise ValueError(f"{path}:{line_no}: non-numeric feature in column {col}: "
                                 f"{cell!r}") from None
        features.append(feat)
        raw_labels.append(row[label_idx])

    widths = {len(f) for f in features}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent row widths {sorted(widths)}")

    mapping: dict[str, int] = {}
    labels = []
    for raw in raw_labels:
        if raw not in mapping:
            mapping[raw] = len(mapping)
        labels.append(mapping[raw])
    labels = np.array(labels, dtype=np.int64)
    codes = _stratified_splits(labels, split_rng or RngState(0, "csv-split"))
    return Dataset(Matrix(features), labels, len(mapping), codes,
                   label_names=tuple(mapping.keys()))


def save_csv(ds: Dataset, path: str, header: bool = True) -> None:
    """Write features plus a final label column; inverse of load_csv."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if header:
            writer.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for i in range(ds.n):
            row = [repr(v) for v in ds.features.a[i].tolist()]
            name = ds.label_names[ds.labels[i]] if ds.label_names else str(int(ds.labels[i]))
            writer.writerow(row + [name])


def save_label_mapping(ds: Dataset, path: str) -> None:
    """Two-column sidecar: original label name, assigned index."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "index"])
        names = ds.label_names or tuple(str(k) for k in range(ds.class_count))
        for k, name in enumerate(names):
            writer.writerow([name, k])


def inject_label_noise(ds: Dataset, spec: NoiseSpec) -> tuple[Dataset, np.ndarray]:
    """Corrupt training labels with probability theta each; flips always
    land on a different class. Returns the new dataset and the flip mask."""
    rng = RngState(spec.seed, "label-noise")
    labels = ds.labels.copy()
    mask = np.zeros(ds.n, dtype=bool)
    train_idx = ds.indices("train")
    coins = rng.random(len(train_idx))
    offsets = rng.integers(1, ds.class_count, len(train_idx))
    for pos, i in enumerate(train_idx):
        if coins[pos] < spec.theta:
            labels[i] = (labels[i] + offsets[pos]) % ds.class_count
            mask[i] = True
    return Dataset(ds.features, labels, ds.class_count, ds.split_codes,
                   ds.label_names), mask


def one_hot(labels: np.ndarray, class_count: int) -> Matrix:
    eye = np.zeros((len(labels), class_count))
    eye[np.arange(len(labels)), labels] = 1.0
    return Matrix._wrap(eye)


def batches(ds: Dataset, split: str, batch_size: int, shuffle: bool,
            rng: Optional[RngState] = None) -> Iterator[tuple[Matrix, Matrix]]:
    """Yield (features, one-hot labels) batches; the final partial batch is
    kept. Shuffling is a deterministic function of the rng."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = ds.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True requires an rng")
        idx = idx[rng.permutation(len(idx))]
    feats = ds.features.a
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        yield (Matrix._wrap(feats[chunk]), one_hot(ds.labels[chunk], ds.class_count))


def standardize(ds: Dataset) -> Dataset:
    """Per-column z-score using training-split statistics (population std);
    constant columns are left unscaled."""
    train = ds.features.a[ds.indices("train")]
    mean = train.mean(axis=0, keepdims=True)
    std = train.std(axis=0, keepdims=True)
    std = np.where(std == 0.0, 1.0, std)
    return Dataset(Matrix._wrap((ds.features.a - mean) / std), ds.labels,
                   ds.class_count, ds.split_codes, ds.label_names)
