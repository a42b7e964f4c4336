"""Synthetic data generators, csv ingestion, and deterministic batching.

Everything here is a pure function of its seed: regenerating a dataset or
re-running a batch stream with the same seed reproduces the exact same
arrays and visit order.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Batch

KINDS = ("synthetic-classification", "synthetic-regression", "synthetic-ctr", "csv")


@dataclass
class DatasetSpec:
    kind: str = "synthetic-classification"
    dims: int = 16
    samples: int = 1024
    seed: int = 0
    test_fraction: float = 0.25
    test_rows: int = 0        # exact test-row count; 0 means use test_fraction
    separation: float = 2.0   # classification: distance between class means
    spread: float = 1.0       # classification / ctr: per-coordinate feature std
    noise: float = 0.1        # regression: label noise std; ctr: noise as a
                              # multiple of the median nonzero margin
    active: float = 0.3       # ctr: fraction of nonzero features per row
    targets: int = 1          # regression: output width
    path: str = ""            # csv: file to ingest

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "csv":
            if self.dims < 1 or self.samples < 2:
                raise ConfigError("need dims >= 1 and samples >= 2")
            if self.test_rows and not 0 < self.test_rows < self.samples:
                raise ConfigError("test_rows must leave training data")
        if self.test_rows < 0:
            raise ConfigError("test_rows must be >= 0")
        if not self.test_rows and not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.kind == "synthetic-ctr" and not 0.0 < self.active <= 1.0:
            raise ConfigError("active must be in (0, 1]")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> int:
        return self.train_x.shape[1]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.train_x.astype(dtype), self.train_y.astype(dtype),
                       self.test_x.astype(dtype), self.test_y.astype(dtype),
                       dict(self.meta))


def bayes_accuracy(separation: float, spread: float) -> float:
    """Best achievable accuracy for two equal spherical Gaussians.

    With means a distance `separation` apart and per-coordinate std
    `spread`, the optimal rule errs with probability 1 - Phi(sep/(2*std)).
    """
    z = separation / (2.0 * spread)
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "csv":
        x, y = read_csv(spec.path)
        return _split(x, y, spec, meta={"path": spec.path})
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    d, n = spec.dims, spec.samples
    if spec.kind == "synthetic-ctr":
        # sparse rows with a planted linear rule; label noise scales with the
        # median nonzero margin so `noise` is unit-free.  Rows are already
        # i.i.d., so train/test split without a shuffle.
        live_mask = rng.random((n, d)) < spec.active
        x = live_mask * rng.normal(0.0, spec.spread, (n, d))
        w_star = rng.standard_normal(d)
        margin = x @ w_star
        live = margin[margin != 0]
        scale = float(np.median(np.abs(live))) if live.size else 1.0
        noisy = margin + spec.noise * scale * rng.standard_normal(n)
        y = (noisy > 0).astype(float).reshape(-1, 1)
        return _split(x, y, spec,
                      meta={"w_star": w_star, "noise_scale": spec.noise * scale})
    if spec.kind == "synthetic-classification":
        # class means at +-(separation/2) along the all-ones direction
        mu = (spec.separation / 2.0) / math.sqrt(d) * np.ones(d)
        n1 = n // 2
        n0 = n - n1
        x0 = rng.normal(0.0, spec.spread, (n0, d)) - mu
        x1 = rng.normal(0.0, spec.spread, (n1, d)) + mu
        x = np.vstack([x0, x1])
        y = np.vstack([np.zeros((n0, 1)), np.ones((n1, 1))])
        meta = {"bayes_accuracy": bayes_accuracy(spec.separation, spec.spread)}
    else:
        x = rng.standard_normal((n, d))
        w_star = rng.standard_normal((d, spec.targets))
        y = x @ w_star + spec.noise * rng.standard_normal((n, spec.targets))
        meta = {"w_star": w_star}
    perm = rng.permutation(n)
    return _split(x[perm], y[perm], spec, meta)


def _split(x, y, spec: DatasetSpec, meta) -> Dataset:
    n = x.shape[0]
    n_test = spec.test_rows or max(1, int(round(n * spec.test_fraction)))
    if n_test >= n:
        raise ConfigError("test split leaves no training data")
    return Dataset(x[:-n_test], y[:-n_test], x[-n_test:], y[-n_test:], meta)


def write_csv(path: str, x, y, label_names=None):
    """Feature columns then label columns, header row, %.17g (round-trip exact)."""
    x = np.asarray(x)
    y = np.atleast_2d(np.asarray(y))
    if y.shape[0] != x.shape[0]:
        raise ShapeError("feature and label row counts differ")
    if label_names is None:
        label_names = ["label"] if y.shape[1] == 1 else \
            [f"label{i}" for i in range(y.shape[1])]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(x.shape[1])] + list(label_names))
        for xi, yi in zip(x, y):
            w.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in yi])


def read_csv(path: str):
    """Inverse of write_csv: numeric features plus label columns on the right."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = rows[0]
    try:
        [float(v) for v in header]
    except ValueError:
        pass
    else:
        raise ConfigError(f"{path}: header row required, got numbers")
    n_labels = sum(1 for name in header if name.startswith("label"))
    if n_labels == 0:
        raise ConfigError(f"{path}: no label column in header {header}")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    if data.shape[1] != len(header):
        raise ConfigError(f"{path}: column count varies")
    return data[:, :-n_labels], data[:, -n_labels:]


class BatchStream:
    """Endless epoch-shuffled batches; visit order is fixed by the seed.

    Every batch has exactly batch_size rows: a trailing partial batch is
    dropped and the epoch reshuffles, so consumers can rely on a constant
    shape (split-gradient feedback buffers do).
    """

    def __init__(self, x, y, batch_size: int, seed: int = 0):
        self.x = np.asarray(x)
        self.y = np.atleast_2d(np.asarray(y))
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError("feature and label row counts differ")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = min(batch_size, self.x.shape[0])
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._order = None
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        n = self.x.shape[0]
        if self._order is None or self._pos + self.batch_size > n:
            self._order = self.rng.permutation(n)
            self._pos = 0
        sel = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return Batch(self.x[sel], self.y[sel])
