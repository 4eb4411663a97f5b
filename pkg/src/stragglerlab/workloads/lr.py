"""Binary logistic regression over sparse features, trained by SGD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from ..injector import ConfigurationError
from .base import BlockUpdate, Workload

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class LabeledExample:
    features: Mapping[int, float]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("labels must be 0 or 1")


class LabeledDataset:
    """Sequence of :class:`LabeledExample` backed by a CSR matrix."""

    def __init__(self, X: sp.csr_matrix, y: np.ndarray):
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] != y.size:
            raise ValueError("feature rows and labels differ in length")
        if y.size and not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.X = sp.csr_matrix(X, dtype=float)
        self.y = y

    @classmethod
    def from_examples(cls, examples, dim: int) -> "LabeledDataset":
        rows, cols, vals, labels = [], [], [], []
        for n, ex in enumerate(examples):
            for k, val in ex.features.items():
                if not 0 <= k < dim:
                    raise ValueError("feature index outside dimension")
                rows.append(n)
                cols.append(k)
                vals.append(val)
            labels.append(ex.label)
        X = sp.csr_matrix((vals, (rows, cols)), shape=(len(labels), dim))
        return cls(X, np.array(labels))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.y.size

    def __getitem__(self, n: int) -> LabeledExample:
        row = self.X.getrow(n)
        return LabeledExample(dict(zip(row.indices.tolist(), row.data.tolist())), int(self.y[n]))


def gen_lr(n: int, dim: int, margin: float, seed: int, nnz: int = 10) -> LabeledDataset:
    """Examples separated by a planted weight vector with at least ``margin``.

    Each example has ``nnz`` non-zero Gaussian features; candidates with
    ``|w* . x| < margin`` are rejected. ``dataset.planted`` holds w*.
    """
    if n < 1 or dim < 1 or nnz < 1:
        raise ConfigurationError("n, dim and nnz must be positive")
    if nnz > dim:
        raise ConfigurationError("nnz cannot exceed dim")
    if margin < 0:
        raise ConfigurationError("margin must be non-negative")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0, dim)
    cols_out, vals_out, scores = [], [], []
    have, attempts = 0, 0
    while have < n:
        batch = max(256, 2 * (n - have))
        attempts += batch
        if attempts > 200 * n + 10_000:
            raise ConfigurationError(f"margin {margin} is infeasible for the planted separator")
        cols = _distinct_columns(rng, batch, dim, nnz)
        vals = rng.normal(0.0, 1.0, (batch, nnz))
        s = np.einsum("bk,bk->b", w[cols], vals)
        keep = np.abs(s) >= margin
        cols_out.append(cols[keep])
        vals_out.append(vals[keep])
        scores.append(s[keep])
        have += int(keep.sum())
    cols = np.concatenate(cols_out)[:n]
    vals = np.concatenate(vals_out)[:n]
    s = np.concatenate(scores)[:n]
    indptr = np.arange(0, n * nnz + 1, nnz)
    X = sp.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(n, dim))
    X.sort_indices()
    out = LabeledDataset(X, (s > 0).astype(np.int64))
    out.planted = w
    return out


def _distinct_columns(rng, batch: int, dim: int, nnz: int) -> np.ndarray:
    if dim <= 64:
        return np.argsort(rng.random((batch, dim)), axis=1)[:, :nnz]
    cols = np.sort(rng.integers(0, dim, (batch, nnz)), axis=1)
    while True:
        dup = (np.diff(cols, axis=1) == 0).any(axis=1)
        if not dup.any():
            return cols
        cols[dup] = np.sort(rng.integers(0, dim, (int(dup.sum()), nnz)), axis=1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def log_loss(z: np.ndarray, y: np.ndarray) -> float:
    z = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


@dataclass
class LRUpdate:
    keys: np.ndarray
    deltas: np.ndarray
    loss: float


def lr_sgd_iteration(weights: np.ndarray, data: LabeledDataset, interval: tuple[int, int], step: float) -> LRUpdate:
    """Deltas ``step * (y - p) x`` summed over the batch, plus its log-loss."""
    lo, hi = interval
    if not 0 <= lo <= hi <= len(data):
        raise ValueError(f"interval {interval} outside dataset")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != data.dim:
        raise ValueError("weight vector does not match feature dimension")
    X = data.X[lo:hi]
    y = data.y[lo:hi]
    z = X @ w
    p = sigmoid(z)
    grad = X.T @ (y - p)
    keys = np.unique(X.indices)
    return LRUpdate(keys, step * grad[keys], log_loss(z, y))


def accuracy(weights: np.ndarray, data: LabeledDataset) -> float:
    pred = (data.X @ np.asarray(weights).reshape(-1)) > 0
    return float(np.mean(pred == (data.y == 1)))


class LRWorkload(Workload):
    """One key per feature, dimension 1."""

    name = "lr"

    def __init__(self, data: LabeledDataset, step: float = 0.1):
        self.data = data
        self.step = step
        self.size = len(data)
        self.capacity = data.dim
        self.dimension = 1

    def process(self, view, lo, hi, iteration) -> BlockUpdate:
        upd = lr_sgd_iteration(view[:, 0], self.data, (lo, hi), self.step)
        return BlockUpdate(upd.keys, upd.deltas.reshape(-1, 1), upd.loss)

    def objective(self, table) -> float:
        return log_loss(self.data.X @ table[:, 0], self.data.y) / max(1, self.size)


def dump_labeled(data: LabeledDataset, path) -> None:
    """SVM-light style: ``label idx:value ...`` with 0/1 labels."""
    with open(path, "w") as fh:
        fh.write(f"# dim {data.dim}\n")
        for n in range(len(data)):
            row = data.X.getrow(n)
            feats = " ".join(f"{k}:{v!r}" for k, v in zip(row.indices.tolist(), row.data.tolist()))
            fh.write(f"{data.y[n]} {feats}\n".rstrip() + "\n")


def load_labeled(path) -> LabeledDataset:
    dim = None
    examples = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["dim"]:
                    dim = int(parts[1])
                continue
            if not line.strip():
                continue
            label, *feats = line.split()
            examples.append(LabeledExample({int(k): float(v) for k, v in (f.split(":") for f in feats)}, int(label)))
    if dim is None:
        dim = 1 + max((k for ex in examples for k in ex.features), default=0)
    return LabeledDataset.from_examples(examples, dim)
