"""Matrix factorization X ~ L R trained by SGD over the observed ratings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..injector import ConfigurationError
from .base import BlockUpdate, NumericError, Workload


@dataclass
class RatingsMatrix:
    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.values)
        if len(self.row_idx) != n or len(self.col_idx) != n:
            raise ValueError("ratings arrays must have equal length")
        if n and (self.row_idx.min() < 0 or self.row_idx.max() >= self.rows
                  or self.col_idx.min() < 0 or self.col_idx.max() >= self.cols):
            raise ValueError("rating index out of range")
        flat = self.row_idx * self.cols + self.col_idx
        if np.unique(flat).size != n:
            raise ValueError("duplicate (row, col) entry")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def entries(self):
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist(), self.values.tolist()))

    def dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.rows, self.cols), fill)
        out[self.row_idx, self.col_idx] = self.values
        return out


@dataclass
class FactorModel:
    L: np.ndarray  # rows x rank
    R: np.ndarray  # rank x cols

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    def predict(self, rows, cols) -> np.ndarray:
        return np.einsum("nr,rn->n", self.L[rows], self.R[:, cols])

    def rmse(self, ratings: RatingsMatrix) -> float:
        err = ratings.values - self.predict(ratings.row_idx, ratings.col_idx)
        return float(np.sqrt(np.mean(err**2)))


def gen_mf(rows: int, cols: int, rank: int, density: float, noise: float, seed: int) -> RatingsMatrix:
    """Planted low-rank ratings: X = U V^T + noise, observed at ``density``.

    Factors are scaled so the noiseless entries have unit variance. Entries
    are stored in a seeded random order so contiguous slices are unbiased
    samples.
    """
    if rows < 1 or cols < 1 or rank < 1:
        raise ConfigurationError("rows, cols and rank must be positive")
    if rank > min(rows, cols):
        raise ConfigurationError("rank cannot exceed min(rows, cols)")
    if not 0.0 < density <= 1.0:
        raise ConfigurationError("density must lie in (0, 1]")
    if noise < 0:
        raise ConfigurationError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    scale = rank ** -0.5
    U = rng.normal(0.0, scale**0.5, (rows, rank))
    V = rng.normal(0.0, scale**0.5, (cols, rank))
    if density >= 1.0:
        r, c = np.divmod(np.arange(rows * cols), cols)
    else:
        mask = rng.random((rows, cols)) < density
        r, c = np.nonzero(mask)
        if r.size == 0:
            raise ConfigurationError("density too low: no observed ratings")
    order = rng.permutation(r.size)
    r, c = r[order], c[order]
    vals = np.einsum("nr,nr->n", U[r], V[c])
    if noise > 0:
        vals = vals + rng.normal(0.0, noise, vals.size)
    out = RatingsMatrix(rows, cols, r, c, vals)
    out.planted = FactorModel(U, V.T.copy())
    return out


def _accumulate(idx: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys, inverse = np.unique(idx, return_inverse=True)
    acc = np.zeros((keys.size, rows.shape[1]))
    np.add.at(acc, inverse, rows)
    return keys, acc


@dataclass
class MFUpdate:
    row_keys: np.ndarray
    dL: np.ndarray
    col_keys: np.ndarray
    dR: np.ndarray  # one row per column key: delta of R[:, j]
    sq_error: float


def mf_sgd_iteration(
    model: FactorModel,
    ratings: RatingsMatrix,
    interval: tuple[int, int],
    step: float,
    reg: float,
    sequential: bool = False,
) -> MFUpdate:
    """SGD deltas for the ratings in ``interval``.

    By default every rating's gradient is taken at ``model`` as given (the
    worker's snapshot) and the deltas are summed. ``sequential=True`` applies
    each rating's step before the next, i.e. plain single-machine SGD; the
    returned deltas are then the net change. ``sq_error`` sums e^2 at the
    point each gradient was taken.
    """
    lo, hi = interval
    if not 0 <= lo <= hi <= len(ratings):
        raise ValueError(f"interval {interval} outside ratings")
    i = ratings.row_idx[lo:hi]
    j = ratings.col_idx[lo:hi]
    v = ratings.values[lo:hi]
    if sequential:
        return _mf_sequential(model, i, j, v, step, reg)
    Li = model.L[i]
    Rj = model.R[:, j].T
    e = v - np.einsum("nr,nr->n", Li, Rj)
    if not np.all(np.isfinite(e)):
        raise NumericError("non-finite residual in MF update")
    dLi = step * (e[:, None] * Rj - reg * Li)
    dRj = step * (e[:, None] * Li - reg * Rj)
    rk, dL = _accumulate(i, dLi)
    ck, dR = _accumulate(j, dRj)
    return MFUpdate(rk, dL, ck, dR, float(e @ e))


def _mf_sequential(model, i, j, v, step, reg) -> MFUpdate:
    L = model.L.copy()
    R = model.R.copy()
    sq = 0.0
    for a, b, val in zip(i.tolist(), j.tolist(), v.tolist()):
        li = L[a].copy()
        rj = R[:, b].copy()
        e = val - li @ rj
        if not np.isfinite(e):
            raise NumericError("non-finite residual in MF update")
        sq += e * e
        L[a] += step * (e * rj - reg * li)
        R[:, b] += step * (e * li - reg * rj)
    rk = np.unique(i)
    ck = np.unique(j)
    return MFUpdate(rk, L[rk] - model.L[rk], ck, (R[:, ck] - model.R[:, ck]).T, sq)


def apply_mf_update(model: FactorModel, update: MFUpdate) -> None:
    model.L[update.row_keys] += update.dL
    model.R[:, update.col_keys] += update.dR.T


class MFWorkload(Workload):
    """Keys [0, rows) hold rows of L, keys [rows, rows + cols) hold columns of R."""

    name = "mf"

    def __init__(self, ratings: RatingsMatrix, rank: int, step: float = 0.005, reg: float = 0.05,
                 init_scale: float = 0.1, seed: int = 0):
        if rank < 1 or rank > min(ratings.rows, ratings.cols):
            raise ConfigurationError("rank must lie in [1, min(rows, cols)]")
        self.ratings = ratings
        self.rank = rank
        self.step = step
        self.reg = reg
        self.init_scale = init_scale
        self.seed = seed
        self.size = len(ratings)
        self.capacity = ratings.rows + ratings.cols
        self.dimension = rank

    def initial_values(self):
        rng = np.random.default_rng([self.seed, 0x4D46])
        vals = rng.normal(0.0, self.init_scale, (self.capacity, self.rank))
        return np.arange(self.capacity), vals

    def model_from(self, table: np.ndarray) -> FactorModel:
        rows = self.ratings.rows
        return FactorModel(table[:rows], table[rows:].T)

    def process(self, view, lo, hi, iteration) -> BlockUpdate:
        upd = mf_sgd_iteration(self.model_from(view), self.ratings, (lo, hi), self.step, self.reg)
        keys = np.concatenate([upd.row_keys, upd.col_keys + self.ratings.rows])
        return BlockUpdate(keys, np.vstack([upd.dL, upd.dR]), upd.sq_error)

    def objective(self, table) -> float:
        return self.model_from(table).rmse(self.ratings)


def dump_ratings(ratings: RatingsMatrix, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {ratings.rows} {ratings.cols}\n")
        for r, c, v in ratings.entries:
            fh.write(f"{r} {c} {v!r}\n")


def load_ratings(path) -> RatingsMatrix:
    rows = cols = None
    r, c, v = [], [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                rows, cols = map(int, line[1:].split())
                continue
            if line.strip():
                a, b, x = line.split()
                r.append(int(a))
                c.append(int(b))
                v.append(float(x))
    if rows is None:
        rows, cols = max(r) + 1, max(c) + 1
    return RatingsMatrix(rows, cols, np.array(r), np.array(c), np.array(v))
