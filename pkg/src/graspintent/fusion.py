"""Early fusion (concatenation + PCA or CMIM selection) and MSE/ACC-weighted
late fusion of kernels.

Every statistic here (column normalization, bin edges, the PCA basis, kernel
weights) is fitted on training rows only and then applied everywhere, so the
evaluation protocols stay leakage-free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dtw import GramMatrix
from .errors import (
    EmptyKernelList,
    InvalidConfig,
    KTooLarge,
    OrderingMismatch,
    RowMismatch,
    SingleClass,
)
from .svm import train_binary, train_ovr

DEFAULT_CMIM_K = 150
DEFAULT_CMIM_BINS = 10
DEFAULT_PCA_K = 160
_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureBlock:
    """A named (n, d) feature matrix with provenance."""

    name: str
    matrix: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise RowMismatch(f"block {self.name!r} must be 2-d, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class ColumnStats:
    """Per-column z-normalization statistics fitted on training rows."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def fit_column_stats(x: np.ndarray, train_rows) -> ColumnStats:
    train = x[np.asarray(train_rows, dtype=np.int64)]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return ColumnStats(mean, std)


def concat_blocks(blocks, train_rows) -> tuple[np.ndarray, ColumnStats]:
    """Column-wise concatenation in declared order, z-normalized with
    training-row statistics; returns the normalized matrix and the stats."""
    if not blocks:
        raise RowMismatch("need at least one block")
    n = blocks[0].matrix.shape[0]
    for b in blocks:
        if b.matrix.shape[0] != n:
            raise RowMismatch(
                f"block {b.name!r} has {b.matrix.shape[0]} rows, expected {n}"
            )
    raw = np.concatenate([b.matrix for b in blocks], axis=1)
    stats = fit_column_stats(raw, train_rows)
    return stats.apply(raw), stats


@dataclass
class PcaResult:
    train: np.ndarray
    applied: np.ndarray
    explained_variance: float
    components: np.ndarray  # (k, d), rows orthonormal
    mean: np.ndarray


def pca_reduce(x_train: np.ndarray, x_apply: np.ndarray, k: int) -> PcaResult:
    """Project onto the top-k eigenvectors of the training covariance.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    x_apply = np.asarray(x_apply, dtype=np.float64)
    n, d = x_train.shape
    limit = min(n - 1, d)
    if not 1 <= k <= limit:
        raise KTooLarge(f"k={k} outside [1, min(n-1, d)={limit}]")
    mean = x_train.mean(axis=0)
    centered = x_train - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = svals**2 / n
    components = vt[:k]
    for row in components:
        peak = int(np.argmax(np.abs(row)))
        if row[peak] < 0:
            row *= -1.0
    total = eigvals.sum()
    explained = float(eigvals[:k].sum() / total) if total > 0 else 1.0
    return PcaResult(
        train=centered @ components.T,
        applied=(x_apply - mean) @ components.T,
        explained_variance=explained,
        components=components,
        mean=mean,
    )


# --- plug-in mutual information over equal-frequency bins -----------------------

def equal_frequency_edges(column: np.ndarray, bins: int) -> np.ndarray:
    """Interior quantile cut points fitted on training values."""
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    return np.quantile(column, qs)


def bin_codes(x: np.ndarray, edges_per_col: list[np.ndarray]) -> np.ndarray:
    """Discretize every column by its fitted cut points."""
    codes = np.empty(x.shape, dtype=np.int64)
    for j, edges in enumerate(edges_per_col):
        codes[:, j] = np.searchsorted(edges, x[:, j], side="right")
    return codes


def _entropy_from_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def mutual_information(xc: np.ndarray, yc: np.ndarray, nx: int, ny: int) -> float:
    """Plug-in I(X;Y) from discrete codes, in nats."""
    joint = np.bincount(xc * ny + yc, minlength=nx * ny)
    hx = _entropy_from_counts(np.bincount(xc, minlength=nx))
    hy = _entropy_from_counts(np.bincount(yc, minlength=ny))
    hxy = _entropy_from_counts(joint)
    return max(hx + hy - hxy, 0.0)


def conditional_mutual_information(
    xc: np.ndarray, yc: np.ndarray, zc: np.ndarray, nx: int, ny: int, nz: int
) -> float:
    """Plug-in I(X;Y|Z) = H(X,Z) + H(Y,Z) - H(Z) - H(X,Y,Z)."""
    hz = _entropy_from_counts(np.bincount(zc, minlength=nz))
    hxz = _entropy_from_counts(np.bincount(xc * nz + zc, minlength=nx * nz))
    hyz = _entropy_from_counts(np.bincount(yc * nz + zc, minlength=ny * nz))
    hxyz = _entropy_from_counts(
        np.bincount((xc * ny + yc) * nz + zc, minlength=nx * ny * nz)
    )
    return max(hxz + hyz - hz - hxyz, 0.0)


def cmim_select(
    x_train: np.ndarray,
    y_train: np.ndarray,
    k: int = DEFAULT_CMIM_K,
    bins: int = DEFAULT_CMIM_BINS,
) -> np.ndarray:
    """Greedy conditional-mutual-information-maximization feature selection.

    Columns are discretized by equal-frequency binning fitted on the training
    rows.  Step 1 picks argmax I(Xj;Y); later steps pick
    argmax_j min_{s in selected} I(Xj; Y | Xs), ties to the lowest index.
    Returns indices in selection order.  Uses the lazy partial-score update,
    which provably returns the same sequence as the naive greedy scan.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.int64)
    n, d = x_train.shape
    if not 1 <= k <= d:
        raise KTooLarge(f"k={k} outside [1, d={d}]")
    if n < bins:
        raise InvalidConfig(f"need at least bins={bins} training rows, got {n}")

    edges = [equal_frequency_edges(x_train[:, j], bins) for j in range(d)]
    codes = bin_codes(x_train, edges)
    classes, yc = np.unique(y, return_inverse=True)
    ny = classes.size

    scores = np.array(
        [mutual_information(codes[:, j], yc, bins, ny) for j in range(d)]
    )
    partial = scores.copy()  # upper bounds on min-CMI given features seen so far
    seen = np.full(d, -1, dtype=np.int64)  # index into `selected` already applied
    selected: list[int] = []

    for _ in range(k):
        best = -1
        best_score = -np.inf
        for j in range(d):
            if seen[j] == -2:
                continue
            while partial[j] > best_score and seen[j] < len(selected) - 1:
                seen[j] += 1
                s = selected[seen[j]]
                cmi = conditional_mutual_information(
                    codes[:, j], yc, codes[:, s], bins, ny, bins
                )
                partial[j] = min(partial[j], cmi)
            if seen[j] == len(selected) - 1 and partial[j] > best_score:
                best = j
                best_score = partial[j]
        selected.append(best)
        seen[best] = -2  # retired
    return np.array(selected, dtype=np.int64)


# --- late fusion of kernels -----------------------------------------------------

@dataclass(frozen=True)
class FusionWeights:
    """Nonnegative per-kernel weights summing to one."""

    weights: np.ndarray
    criterion: str
    names: tuple[str, ...] = ()
    metrics: tuple[float, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise InvalidConfig(f"weights must be nonnegative and sum to 1, got {w}")
        object.__setattr__(self, "weights", w)


def trace_normalize(gram: GramMatrix) -> tuple[GramMatrix, float]:
    """Rescale so that trace(K) = n; returns the matrix and the scale used."""
    trace = float(np.trace(gram.values))
    scale = gram.n / trace if trace > 0 else 1.0
    return (
        GramMatrix(gram.values * scale, gram.ids, dict(gram.provenance)),
        scale,
    )


def _cv_folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [fold for fold in np.array_split(perm, folds) if fold.size]


def _kernel_cv_metrics(
    kernel: np.ndarray, y: np.ndarray, folds: list[np.ndarray], C: float
) -> tuple[float, float]:
    """(mean accuracy, mean squared decision error vs +-1 targets) over folds."""
    classes = np.unique(y)
    accs, mses = [], []
    for fold in folds:
        val = fold
        train = np.setdiff1d(np.arange(y.size), val, assume_unique=False)
        if np.unique(y[train]).size < 2 or val.size == 0:
            continue
        sub = kernel[np.ix_(train, train)]
        rows = kernel[np.ix_(val, train)]
        if classes.size == 2:
            ybin = np.where(y == classes[1], 1.0, -1.0)
            model = train_binary(sub, ybin[train], C=C, precomputed=True)
            dec = model.decision_values(rows)
            pred = np.where(dec >= 0, classes[1], classes[0])
            target = ybin[val]
            mses.append(float(np.mean((dec - target) ** 2)))
        else:
            model = train_ovr(sub, y[train], C=C, precomputed=True)
            dec = model.decision_values(rows)
            pred = model.classes[np.argmax(dec, axis=1)]
            target = np.where(y[val][:, None] == model.classes[None, :], 1.0, -1.0)
            mses.append(float(np.mean((dec - target) ** 2)))
        accs.append(float(np.mean(pred == y[val])))
    if not accs:
        raise SingleClass("no cross-validation fold had both classes")
    return float(np.mean(accs)), float(np.mean(mses))


def late_fuse(
    grams: list[GramMatrix],
    y_train,
    criterion: str = "ACC",
    C: float = 10.0,
    folds: int = 5,
    seed: int = 0,
) -> tuple[GramMatrix, FusionWeights]:
    """Combine kernels over the training set, weighted by cross-validated
    accuracy (ACC) or inverse decision-value MSE (MSE).

    Each kernel is trace-normalized to trace = n before combination.
    """
    if not grams:
        raise EmptyKernelList("late fusion needs at least one kernel")
    if criterion not in ("ACC", "MSE"):
        raise InvalidConfig(f"criterion must be ACC or MSE, got {criterion!r}")
    ids = grams[0].ids
    n = grams[0].n
    for g in grams[1:]:
        if g.n != n or g.ids != ids:
            raise OrderingMismatch("kernels must share one trial ordering")
    y = np.asarray(y_train, dtype=np.int64)
    if y.size != n:
        raise OrderingMismatch("labels must align with the kernel ordering")

    normalized = []
    raw_scores = []
    cv = _cv_folds(n, folds, seed)
    for g in grams:
        gn, _ = trace_normalize(g)
        normalized.append(gn)
        acc, mse = _kernel_cv_metrics(gn.values, y, cv, C)
        raw_scores.append(acc if criterion == "ACC" else 1.0 / (mse + 1e-12))
    raw = np.array(raw_scores)
    weights = raw / raw.sum() if raw.sum() > 0 else np.full(len(grams), 1.0 / len(grams))

    fused = sum(w * g.values for w, g in zip(weights, normalized))
    names = tuple(str(g.provenance.get("kind", f"kernel{i}")) for i, g in enumerate(grams))
    fusion_weights = FusionWeights(
        weights=weights, criterion=criterion, names=names, metrics=tuple(raw)
    )
    gram = GramMatrix(
        fused,
        ids,
        {"kind": "fused", "criterion": criterion, "weights": weights.tolist(), "of": list(names)},
    )
    return gram, fusion_weights
