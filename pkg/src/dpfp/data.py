"""Synthetic Gaussian-blob corpora and the CSV dataset format.

File layout: a header row ``label,x0,...,x{n-1}`` then one record per line,
integer label first, UTF-8 with LF line endings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mechanism import make_rng


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be 2-D with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]


def make_blobs(
    num_records: int,
    input_dim: int = 20,
    num_classes: int = 2,
    separation: float = 3.0,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian blobs split 90/10 into (train, dev).

    Class means are ``separation`` times orthonormal directions, so any two
    means sit ``separation * sqrt(2)`` apart.
    """
    if num_records < 10:
        raise ValueError("num_records must be at least 10")
    if input_dim < 1 or num_classes < 2:
        raise ValueError("need input_dim >= 1 and num_classes >= 2")
    if num_classes > input_dim:
        raise ValueError("num_classes may not exceed input_dim (means are orthonormal directions)")
    rng = make_rng(seed, 0xDA7A)
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, num_classes)))
    means = separation * q.T
    y = rng.integers(0, num_classes, size=num_records)
    X = means[y] + rng.standard_normal((num_records, input_dim))
    n_train = int(round(0.9 * num_records))
    return (
        Dataset(X[:n_train], y[:n_train], num_classes),
        Dataset(X[n_train:], y[n_train:], num_classes),
    )


def write_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x{i}" for i in range(ds.input_dim)])
        for label, row in zip(ds.y, ds.X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_dataset(path: str | Path, num_classes: int | None = None) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ValueError(f"{path}: missing 'label,...' header row")
    width = len(rows[0])
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
    y = np.array([int(r[0]) for r in body], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), width - 1)
    if num_classes is None:
        num_classes = max(int(y.max()) + 1, 2) if len(y) else 2
    return Dataset(X, y, num_classes)
