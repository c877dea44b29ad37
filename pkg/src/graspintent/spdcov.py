"""Covariance descriptors: flat covariance, temporal-pyramid covariance, and a
random-feature kernelized covariance Gram.

All descriptors are compared in the log-Euclidean geometry: the matrix log is
flattened so that plain dot products equal Frobenius inner products of logs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .dtw import GramMatrix
from .errors import (
    InvalidBandwidth,
    InvalidConfig,
    NotPositiveDefinite,
    TooShort,
)

_AUTO_LAMBDA_SCALE = 1e-6
_AUTO_LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class SpdDescriptor:
    """Regularized covariance of one trial or window."""

    matrix: np.ndarray
    lam: float
    window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidConfig(f"descriptor must be square, got {m.shape}")
        if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise InvalidConfig("descriptor must be symmetric")
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class HCovConfig:
    """Temporal pyramid: L levels, optional half-shifted windows, regularizer.

    ``lam=None`` picks 1e-6 times the mean diagonal of each window covariance.
    """

    levels: int = 3
    overlap: bool = True
    lam: float | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidConfig("levels must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise InvalidConfig("lam must be >= 0")


def _auto_lambda(cov: np.ndarray) -> float:
    mean_diag = float(np.mean(np.diag(cov)))
    return max(_AUTO_LAMBDA_SCALE * mean_diag, _AUTO_LAMBDA_FLOOR)


def covariance_descriptor(samples, lam: float | None = None, window=(0.0, 1.0)) -> SpdDescriptor:
    """Population covariance of (T, d) samples plus a lam * I ridge."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooShort(f"need a (T>=2, d) sample matrix, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    if lam is None:
        lam = _auto_lambda(cov)
    cov = cov + lam * np.eye(x.shape[1])
    return SpdDescriptor(cov, float(lam), tuple(window))


def log_euclidean_vec(desc: SpdDescriptor) -> np.ndarray:
    """Upper-triangle flattening of log(C), off-diagonals scaled by sqrt(2)."""
    eigvals, eigvecs = np.linalg.eigh(desc.matrix)
    if eigvals[0] <= 0:
        raise NotPositiveDefinite(
            f"minimum eigenvalue {eigvals[0]:.3e} is not positive"
        )
    logm = (eigvecs * np.log(eigvals)) @ eigvecs.T
    logm = 0.5 * (logm + logm.T)
    d = desc.dim
    iu = np.triu_indices(d)
    vec = logm[iu].copy()
    off = iu[0] != iu[1]
    vec[off] *= np.sqrt(2.0)
    return vec


def log_euclidean_unvec(vec: np.ndarray, dim: int) -> np.ndarray:
    """Inverse flattening: rebuild the symmetric log matrix."""
    iu = np.triu_indices(dim)
    vals = np.asarray(vec, dtype=np.float64).copy()
    off = iu[0] != iu[1]
    vals[off] /= np.sqrt(2.0)
    logm = np.zeros((dim, dim))
    logm[iu] = vals
    logm = logm + np.triu(logm, 1).T
    return logm


def spd_exp(logm: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix via eigendecomposition."""
    eigvals, eigvecs = np.linalg.eigh(logm)
    return (eigvecs * np.exp(eigvals)) @ eigvecs.T


def hcov_windows(n_frames: int, levels: int, overlap: bool) -> list[tuple[int, int]]:
    """(start, end) index pairs in (level, window-start) order.

    Level l splits [0, T) into 2**(l-1) equal windows; with overlap, levels
    l >= 2 add the half-shifted windows in between.
    """
    windows = []
    for level in range(1, levels + 1):
        m = 2 ** (level - 1)
        step = n_frames / m
        level_windows = [
            (int(round(i * step)), int(round((i + 1) * step))) for i in range(m)
        ]
        if overlap and level >= 2:
            level_windows += [
                (int(round((i + 0.5) * step)), int(round((i + 1.5) * step)))
                for i in range(m - 1)
            ]
        level_windows.sort(key=lambda se: se[0])
        windows.extend(level_windows)
    return windows


def hcov_descriptor(samples, config: HCovConfig = HCovConfig()) -> np.ndarray:
    """Concatenated log-Euclidean vectors over the temporal pyramid."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise TooShort(f"need a (T, d) sample matrix, got shape {x.shape}")
    min_frames = 2 * 2 ** (config.levels - 1)
    if x.shape[0] < min_frames:
        raise TooShort(
            f"pyramid with L={config.levels} needs T >= {min_frames}, got {x.shape[0]}"
        )
    n = x.shape[0]
    parts = []
    for start, end in hcov_windows(n, config.levels, config.overlap):
        desc = covariance_descriptor(
            x[start:end], lam=config.lam, window=(start / n, end / n)
        )
        parts.append(log_euclidean_vec(desc))
    return np.concatenate(parts)


# --- kernelized covariance via an explicit random-feature lift -----------------

def random_fourier_lift(frames: np.ndarray, gamma: float, n_lift: int, seed: int) -> np.ndarray:
    """Map (T, d) frames through random Fourier features of the Gaussian kernel
    exp(-|x-y|^2 / (2 gamma^2)); the draw is fixed by the seed so every trial
    shares one lift."""
    if gamma <= 0:
        raise InvalidBandwidth(f"gamma must be > 0, got {gamma}")
    d = frames.shape[1]
    if n_lift < d:
        raise InvalidConfig(f"n_lift ({n_lift}) must be >= frame dimension ({d})")
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 1.0 / gamma, (d, n_lift))
    phases = rng.uniform(0.0, 2.0 * np.pi, n_lift)
    return np.sqrt(2.0 / n_lift) * np.cos(frames @ weights + phases)


def kercov_vectors(
    trials_frames, gamma: float, n_lift: int = 128, seed: int = 0, lam: float | None = None
) -> np.ndarray:
    """Log-Euclidean vectors of lifted covariances, one row per trial."""
    rows = []
    for frames in trials_frames:
        frames = np.asarray(frames, dtype=np.float64)
        lifted = random_fourier_lift(frames, gamma, n_lift, seed)
        desc = covariance_descriptor(lifted, lam=lam)
        rows.append(log_euclidean_vec(desc))
    return np.stack(rows)


def kercov_gram(
    trials_frames, gamma: float, n_lift: int = 128, seed: int = 0, ids=()
) -> GramMatrix:
    """Linear Gram of the kernelized-covariance vectors."""
    vectors = kercov_vectors(trials_frames, gamma, n_lift, seed)
    gram = vectors @ vectors.T
    return GramMatrix(
        gram,
        tuple(ids),
        {
            "kind": "kercov",
            "gamma": float(gamma),
            "n_lift": int(n_lift),
            "seed": int(seed),
            "approximation": "random-fourier lift",
        },
    )


def median_frame_distance(trials_frames, max_frames: int = 1500) -> float:
    """Median pairwise Euclidean distance over a deterministic frame subsample."""
    pooled = np.concatenate([np.asarray(f, dtype=np.float64) for f in trials_frames])
    if pooled.shape[0] > max_frames:
        stride = int(np.ceil(pooled.shape[0] / max_frames))
        pooled = pooled[::stride]
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def bandwidth_grid(scale: float, powers=range(-4, 5)) -> list[float]:
    """Candidate bandwidths: powers of two times a data-driven scale."""
    return [float(scale * 2.0**p) for p in powers]
