"""Multivariate dynamic time warping, k-nn classification, and the graph
Laplacian kernelization of a distance matrix.

Warping paths use the classic step set {(1,0),(0,1),(1,1)} with unit weights
and endpoint alignment; the local cost is the Euclidean distance between
frame columns (a squared-cost variant is exposed via a flag).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from .errors import (
    DimensionMismatch,
    EigenFailure,
    InvalidSigma,
    KTooLarge,
)

# Eigenvalues below this fraction of the largest one are treated as zero when
# pseudo-inverting the normalized Laplacian.
_EIG_CUTOFF = 1e-10
_PSD_TOL = 1e-8


@njit(cache=True)
def _path_cost(cost):  # pragma: no cover - exercised via dtw_distance
    n, m = cost.shape
    prev = np.empty(m)
    curr = np.empty(m)
    prev[0] = cost[0, 0]
    for j in range(1, m):
        prev[j] = prev[j - 1] + cost[0, j]
    for i in range(1, n):
        curr[0] = prev[0] + cost[i, 0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if curr[j - 1] < best:
                best = curr[j - 1]
            curr[j] = best + cost[i, j]
        prev, curr = curr, prev
    return prev[m - 1]


def _as_channels(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DimensionMismatch(f"expected a (channels, T) sequence, got shape {arr.shape}")
    return arr


def dtw_distance(x, y, squared: bool = False) -> float:
    """Minimum cumulative local cost over monotone warping paths.

    Inputs are (d, T) channel matrices; 1-d arrays are treated as d=1.
    """
    xs, ys = _as_channels(x), _as_channels(y)
    if xs.shape[0] != ys.shape[0]:
        raise DimensionMismatch(
            f"channel counts differ: {xs.shape[0]} vs {ys.shape[0]}"
        )
    metric = "sqeuclidean" if squared else "euclidean"
    cost = cdist(xs.T, ys.T, metric=metric)
    return float(_path_cost(cost))


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative pairwise distances with a trial-id ordering."""

    values: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        n = values.shape[0]
        if values.ndim != 2 or values.shape != (n, n):
            raise DimensionMismatch(f"distance matrix must be square, got {values.shape}")
        if not np.allclose(values, values.T, atol=1e-9):
            raise DimensionMismatch("distance matrix must be symmetric")
        if np.any(np.diag(values) != 0):
            raise DimensionMismatch("distance matrix must have a zero diagonal")
        if np.any(values < 0):
            raise DimensionMismatch("distances must be nonnegative")
        object.__setattr__(self, "values", values)
        ids = tuple(self.ids) if self.ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DimensionMismatch("id count does not match matrix size")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        _matrix_to_csv(self.values, self.ids, path)

    @classmethod
    def from_csv(cls, path) -> "DistanceMatrix":
        values, ids = _matrix_from_csv(path)
        return cls(values, ids)


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD kernel matrix with provenance metadata."""

    values: np.ndarray
    ids: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        n = values.shape[0]
        if values.ndim != 2 or values.shape != (n, n):
            raise DimensionMismatch(f"gram matrix must be square, got {values.shape}")
        if not np.allclose(values, values.T, atol=1e-8 * max(1.0, np.abs(values).max())):
            raise DimensionMismatch("gram matrix must be symmetric")
        object.__setattr__(self, "values", 0.5 * (values + values.T))
        ids = tuple(self.ids) if self.ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DimensionMismatch("id count does not match matrix size")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    def is_psd(self, tol: float = _PSD_TOL) -> bool:
        trace = float(np.trace(self.values))
        return self.min_eigenvalue() >= -tol * max(trace, np.finfo(float).tiny)

    def to_csv(self, path) -> None:
        _matrix_to_csv(self.values, self.ids, path)

    @classmethod
    def from_csv(cls, path, provenance: dict | None = None) -> "GramMatrix":
        values, ids = _matrix_from_csv(path)
        return cls(values, ids, provenance or {})


def _matrix_to_csv(values: np.ndarray, ids: tuple[str, ...], path) -> None:
    with open(path, "w") as fh:
        fh.write("," + ",".join(ids) + "\n")
        for tid, row in zip(ids, values):
            fh.write(tid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _matrix_from_csv(path) -> tuple[np.ndarray, tuple[str, ...]]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")[1:]
        rows = []
        for line in fh:
            rows.append([float(v) for v in line.rstrip("\n").split(",")[1:]])
    return np.array(rows, dtype=np.float64), tuple(header)


def distance_matrix(sequences, ids=None, squared: bool = False) -> DistanceMatrix:
    """All-pairs DTW distances; the upper triangle is computed once."""
    seqs = [_as_channels(s) for s in sequences]
    if not seqs:
        raise DimensionMismatch("need at least one sequence")
    d = seqs[0].shape[0]
    for s in seqs[1:]:
        if s.shape[0] != d:
            raise DimensionMismatch("sequences disagree on channel count")
    n = len(seqs)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = dtw_distance(seqs[i], seqs[j], squared=squared)
    return DistanceMatrix(values, tuple(ids) if ids else ())


def cross_distances(test_sequences, train_sequences, squared: bool = False) -> np.ndarray:
    """(m, n) DTW distances from test to train sequences."""
    test = [_as_channels(s) for s in test_sequences]
    train = [_as_channels(s) for s in train_sequences]
    out = np.zeros((len(test), len(train)))
    for i, ts in enumerate(test):
        for j, tr in enumerate(train):
            out[i, j] = dtw_distance(ts, tr, squared=squared)
    return out


def knn_classify(dist, train_idx, train_labels, test_idx, k: int = 5) -> np.ndarray:
    """Majority vote among the k nearest training neighbours.

    Ties break by the smaller summed distance within the tied classes, then by
    the smaller class code.
    """
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if labels.shape[0] != train_idx.shape[0]:
        raise DimensionMismatch("train_labels must align with train_idx")
    if k > train_idx.size:
        raise KTooLarge(f"k={k} exceeds {train_idx.size} training points")
    out = np.empty(test_idx.size, dtype=np.int64)
    for pos, t in enumerate(test_idx):
        row = values[t, train_idx]
        order = np.argsort(row, kind="stable")[:k]
        neigh_labels = labels[order]
        neigh_dists = row[order]
        classes = np.unique(neigh_labels)
        counts = np.array([(neigh_labels == c).sum() for c in classes])
        sums = np.array([neigh_dists[neigh_labels == c].sum() for c in classes])
        best = np.flatnonzero(counts == counts.max())
        if best.size > 1:
            tied_sums = sums[best]
            best = best[np.flatnonzero(tied_sums == tied_sums.min())]
        out[pos] = classes[best[0]]  # classes sorted ascending: code order tie-break
    return out


def median_heuristic_sigma(dist: DistanceMatrix) -> float:
    """Median off-diagonal distance; falls back to 1 when all distances are zero."""
    values = dist.values
    n = values.shape[0]
    if n < 2:
        return 1.0
    off = values[~np.eye(n, dtype=bool)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def _affinity(values: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(values**2) / (2.0 * sigma**2))


def laplacian_kernel(dist: DistanceMatrix, sigma: float) -> GramMatrix:
    """Pseudo-inverse of the symmetric normalized graph Laplacian built from a
    Gaussian affinity of the distances."""
    if sigma <= 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    w = _affinity(dist.values, sigma)
    d = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    m = w * np.outer(inv_sqrt, inv_sqrt)
    lap = np.eye(dist.n) - m
    lap = 0.5 * (lap + lap.T)
    try:
        eigvals, eigvecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    cutoff = _EIG_CUTOFF * max(eigvals.max(), 0.0)
    inv = np.where(eigvals > cutoff, 1.0 / np.where(eigvals > cutoff, eigvals, 1.0), 0.0)
    kernel = (eigvecs * inv) @ eigvecs.T
    kernel = 0.5 * (kernel + kernel.T)
    return GramMatrix(kernel, dist.ids, {"kind": "dtw-laplacian", "sigma": float(sigma)})


class LaplacianEmbedding:
    """Feature-space view of the Laplacian kernel with an out-of-sample rule.

    Training features reproduce ``laplacian_kernel`` exactly on the retained
    spectrum; unseen points are embedded through the normalized-affinity
    eigenfunction extension, which keeps the pipeline inductive.
    """

    def __init__(self, dist: DistanceMatrix, sigma: float):
        if sigma <= 0:
            raise InvalidSigma(f"sigma must be > 0, got {sigma}")
        self.sigma = float(sigma)
        w = _affinity(dist.values, sigma)
        self._degrees = w.sum(axis=1)
        inv_sqrt = 1.0 / np.sqrt(self._degrees)
        m = w * np.outer(inv_sqrt, inv_sqrt)
        m = 0.5 * (m + m.T)
        try:
            mu, vecs = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:
            raise EigenFailure(str(exc)) from exc
        lam = 1.0 - mu
        cutoff = _EIG_CUTOFF * max(lam.max(), 0.0)
        keep = (lam > cutoff) & (np.abs(mu) > 1e-12)
        self._mu = mu[keep]
        self._lam = lam[keep]
        self._vecs = vecs[:, keep]
        self._inv_sqrt_deg = inv_sqrt
        self.train_features = self._vecs / np.sqrt(self._lam)

    def train_gram(self, ids=()) -> GramMatrix:
        return GramMatrix(
            self.train_features @ self.train_features.T,
            tuple(ids),
            {"kind": "dtw-laplacian", "sigma": self.sigma},
        )

    def extend(self, dist_to_train: np.ndarray) -> np.ndarray:
        """Features for new points from their distances to the training set."""
        w = _affinity(np.asarray(dist_to_train, dtype=np.float64), self.sigma)
        deg = w.sum(axis=1)
        deg = np.maximum(deg, np.finfo(float).tiny)
        normalized = (w / np.sqrt(deg)[:, None]) * self._inv_sqrt_deg[None, :]
        u = (normalized @ self._vecs) / self._mu
        return u / np.sqrt(self._lam)

    def extend_gram_rows(self, dist_to_train: np.ndarray) -> np.ndarray:
        """Kernel rows k(new, train_j)."""
        return self.extend(dist_to_train) @ self.train_features.T
