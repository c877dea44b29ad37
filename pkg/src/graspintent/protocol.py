"""Experiment harness: representations, one-subject-out evaluation, pairwise
comparison suites, snippet sweeps, and the two-layer (subject -> intention)
classifier.

Every representation is fitted strictly on training trials; per-trial feature
tables are shared across folds through a FeatureCache because they involve no
training statistics.  Fitted parameters are exposed as flat dicts so tests can
hash them and audit for leakage.
"""
from __future__ import annotations

import hashlib
import itertools
import time
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from . import dtw as dtwmod
from . import fusion as fus
from . import spdcov
from . import svm as svmmod
from .data import Dataset, Intention, MarkerMap, Trial
from .errors import InsufficientCell, InvalidConfig, SingleClass
from .kinematics import (
    CHANNEL_ORDER,
    SegmentationParams,
    compute_series,
    condition_trial,
    native_channel_matrix,
    truncate_snippet,
)

# Pipelines run the dual solver at a slightly looser stopping tolerance than
# the solver's own default: decision values move by O(tol), far below any
# margin that matters, and the near-duplicate snippet problems converge to
# 1e-3 orders of magnitude faster than to 1e-4.
BASE_DEFAULTS = {
    "C": 10.0,
    "tol": 1e-3,
    "epsilon": 20.0,
    "cutoff_hz": 6.0,
    "n_samples": 100,
}

REPRESENTATION_DEFAULTS = {
    "majority": {},
    "fk": {},
    "fglobal": {},
    "flocal": {},
    "cov": {"cov_mode": "markers"},
    "hcov": {"cov_mode": "markers", "levels": 3, "overlap": True},
    "kercov": {
        "n_lift": 128,
        "gamma_powers": list(range(-4, 5)),
        "cv_folds": 3,
        "lift_seed": 12345,
    },
    "dtw-knn": {"knn_k": 5},
    "dtw-laplacian-svm": {"sigma": "median"},
    "cmim-fused": {"blocks": ["fk", "hcov16"], "k_cmim": 150, "cmim_bins": 10},
    "pca-fused": {"blocks": ["fk", "hcov16"], "pca_k": 160},
    "late-fused": {
        "kernels": ["fk-rbf", "hcov16-linear"],
        "fusion_criterion": "ACC",
        "cv_folds": 5,
    },
}

FEATURE_BLOCKS = ("fk", "fglobal", "flocal", "cov", "cov16", "hcov", "hcov16", "kercov")
KERNEL_PIECES = (
    "fk-rbf",
    "fglobal-rbf",
    "flocal-rbf",
    "cov-linear",
    "hcov-linear",
    "hcov16-linear",
    "kercov",
    "dtw-laplacian",
)


@dataclass(frozen=True)
class PipelineSpec:
    """A representation name, its hyperparameters, and an optional class subset."""

    representation: str
    hyperparams: dict = field(default_factory=dict)
    classes: tuple[Intention, ...] | None = None

    def __post_init__(self):
        if self.representation not in REPRESENTATION_DEFAULTS:
            raise InvalidConfig(
                f"unknown representation {self.representation!r}; "
                f"choose from {sorted(REPRESENTATION_DEFAULTS)}"
            )
        allowed = set(BASE_DEFAULTS) | set(REPRESENTATION_DEFAULTS[self.representation])
        unknown = set(self.hyperparams) - allowed
        if unknown:
            raise InvalidConfig(
                f"unknown hyperparameters for {self.representation!r}: {sorted(unknown)}"
            )
        if self.classes is not None:
            object.__setattr__(
                self, "classes", tuple(sorted(Intention(c) for c in self.classes))
            )
            if len(set(self.classes)) < 2:
                raise InvalidConfig("class subset needs at least two intentions")

    def resolved(self) -> dict:
        hp = dict(BASE_DEFAULTS)
        hp.update(REPRESENTATION_DEFAULTS[self.representation])
        hp.update(self.hyperparams)
        return hp

    def to_json_dict(self) -> dict:
        return {
            "representation": self.representation,
            "hyperparams": self.resolved(),
            "classes": [c.label for c in self.classes] if self.classes else None,
        }


def fold_seed(*parts: int) -> int:
    """Deterministic integer seed derived from experiment seed components."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def state_digest(state: dict) -> str:
    """Stable hash of a fitted-parameter dict, for leakage audits."""
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        v = state[key]
        if isinstance(v, np.ndarray):
            arr = np.ascontiguousarray(v)
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        elif isinstance(v, (bool, int, np.integer)):
            h.update(str(int(v)).encode())
        elif isinstance(v, (float, np.floating)):
            h.update(np.float64(v).tobytes())
        elif isinstance(v, str):
            h.update(v.encode())
        elif isinstance(v, (list, tuple)):
            h.update(repr(v).encode())
        elif v is None:
            h.update(b"<none>")
        else:
            raise TypeError(f"cannot digest state entry {key!r} of type {type(v)}")
    return h.hexdigest()


def _unit_scale(x: np.ndarray) -> np.ndarray:
    """Scale rows by 1/sqrt(d) so standardized vectors have roughly unit norm;
    keeps C=10 in its intended soft-margin regime."""
    return x / np.sqrt(max(1, x.shape[1]))


def _trace_scale(gram_train: np.ndarray) -> float:
    """Factor that rescales a training Gram to trace = n."""
    tr = float(np.trace(gram_train))
    return gram_train.shape[0] / tr if tr > 0 else 1.0


def _svm_state(prefix: str, model) -> dict:
    state = {}
    if isinstance(model, svmmod.OvrModel):
        state[f"{prefix}.classes"] = model.classes
        for k, m in enumerate(model.models):
            state.update(_svm_state(f"{prefix}.{k}", m))
        return state
    state[f"{prefix}.b"] = model.b
    state[f"{prefix}.alpha"] = model.alpha
    if model.w is not None:
        state[f"{prefix}.w"] = model.w
    return state


class FeatureCache:
    """Per-trial feature tables for one conditioned trial list.

    Everything here is a pure function of a single trial, so one cache can be
    shared by all folds of an evaluation without leaking training statistics.
    """

    def __init__(
        self,
        trials,
        marker_map: MarkerMap,
        epsilon: float = 20.0,
        cutoff_hz: float = 6.0,
        n_samples: int = 100,
        fraction: float = 1.0,
        preconditioned: bool = False,
    ):
        self._init_args = (epsilon, cutoff_hz, n_samples)
        if preconditioned:
            conditioned = list(trials)
        else:
            params = SegmentationParams(epsilon=epsilon, cutoff_hz=cutoff_hz)
            conditioned = [condition_trial(t, params, marker_map) for t in trials]
        if fraction != 1.0:
            conditioned = [truncate_snippet(t, fraction) for t in conditioned]
        self.trials: list[Trial] = conditioned
        self.marker_map = marker_map
        self.n_samples = n_samples
        self.ids = tuple(t.trial_id for t in conditioned)
        self.subjects = np.array([t.subject_id for t in conditioned], dtype=np.int64)
        self.intentions = np.array([int(t.intention) for t in conditioned], dtype=np.int64)
        self._tables: dict = {}

    @property
    def n(self) -> int:
        return len(self.trials)

    def kin100(self) -> np.ndarray:
        """(n, 16, n_samples) resampled channel stack in canonical order."""
        if "kin100" not in self._tables:
            stacks = [
                compute_series(t, self.marker_map, self.n_samples).matrix()
                for t in self.trials
            ]
            self._tables["kin100"] = np.stack(stacks)
        return self._tables["kin100"]

    def native_series(self) -> list[np.ndarray]:
        """Per-trial (16, T) channel matrices at native length."""
        if "series" not in self._tables:
            self._tables["series"] = [
                native_channel_matrix(t, self.marker_map) for t in self.trials
            ]
        return self._tables["series"]

    def raw_frames(self) -> list[np.ndarray]:
        """Per-trial (T, 60) flattened marker coordinates."""
        if "raw" not in self._tables:
            self._tables["raw"] = [
                t.frames.reshape(t.n_frames, -1) for t in self.trials
            ]
        return self._tables["raw"]

    def matrix(self, name: str, hp: dict | None = None) -> np.ndarray:
        """Per-trial feature matrix for a named block (no fitted statistics)."""
        hp = hp or {}
        levels = int(hp.get("levels", 3))
        overlap = bool(hp.get("overlap", True))
        key = (name, levels, overlap)
        if key in self._tables:
            return self._tables[key]
        k = self.kin100()
        n_local = len(CHANNEL_ORDER) - 4
        if name == "fk":
            out = k.reshape(self.n, -1)
        elif name == "flocal":
            out = k[:, :n_local, :].reshape(self.n, -1)
        elif name == "fglobal":
            out = k[:, n_local:, :].reshape(self.n, -1)
        elif name == "cov":
            out = np.stack(
                [
                    spdcov.log_euclidean_vec(spdcov.covariance_descriptor(f))
                    for f in self.raw_frames()
                ]
            )
        elif name == "cov16":
            out = np.stack(
                [
                    spdcov.log_euclidean_vec(spdcov.covariance_descriptor(k[i].T))
                    for i in range(self.n)
                ]
            )
        elif name == "hcov":
            cfg = spdcov.HCovConfig(levels=levels, overlap=overlap)
            out = np.stack([spdcov.hcov_descriptor(f, cfg) for f in self.raw_frames()])
        elif name == "hcov16":
            cfg = spdcov.HCovConfig(levels=levels, overlap=overlap)
            out = np.stack([spdcov.hcov_descriptor(k[i].T, cfg) for i in range(self.n)])
        else:
            raise InvalidConfig(f"unknown feature block {name!r}")
        self._tables[key] = out
        return out

    def kercov_matrix(self, gamma: float, n_lift: int, seed: int) -> np.ndarray:
        key = ("kercov", float(gamma), int(n_lift), int(seed))
        if key not in self._tables:
            self._tables[key] = spdcov.kercov_vectors(
                self.raw_frames(), gamma, n_lift=n_lift, seed=seed
            )
        return self._tables[key]

    def with_fraction(self, fraction: float) -> "FeatureCache":
        """A cache over the same conditioned trials truncated to a snippet."""
        eps, cutoff, n_samples = self._init_args
        return FeatureCache(
            self.trials,
            self.marker_map,
            epsilon=eps,
            cutoff_hz=cutoff,
            n_samples=n_samples,
            fraction=fraction,
            preconditioned=True,
        )


def build_cache(dataset: Dataset, hp: dict, fraction: float = 1.0) -> FeatureCache:
    return FeatureCache(
        dataset.trials,
        dataset.marker_map,
        epsilon=hp["epsilon"],
        cutoff_hz=hp["cutoff_hz"],
        n_samples=hp["n_samples"],
        fraction=fraction,
    )


# --- fitted pipelines -----------------------------------------------------------

class _MajorityFit:
    def __init__(self, cache, train_idx, hp, seed):
        labels = cache.intentions[train_idx]
        counts = np.bincount(labels, minlength=len(Intention))
        self.majority = int(np.argmax(counts))

    def predict(self, cache, idx):
        return np.full(len(idx), self.majority, dtype=np.int64)

    def state(self):
        return {"majority": self.majority}


class _VectorFit:
    """Standardize a per-trial feature matrix on training rows, then linear OvR."""

    def __init__(self, cache, train_idx, hp, seed, block: str):
        self.block = block
        x = cache.matrix(block, hp)
        self.stats = fus.fit_column_stats(x, train_idx)
        xn = _unit_scale(self.stats.apply(x[train_idx]))
        self.model = svmmod.train_ovr(
            xn, cache.intentions[train_idx], C=hp["C"], tol=hp["tol"]
        )
        self.hp = hp

    def predict(self, cache, idx):
        x = _unit_scale(self.stats.apply(cache.matrix(self.block, self.hp)[idx]))
        return self.model.predict(x)

    def state(self):
        out = {"stats.mean": self.stats.mean, "stats.std": self.stats.std}
        out.update(_svm_state("svm", self.model))
        return out


class _ChannelNorm:
    """Per-channel z-normalization fitted on pooled training frames."""

    def __init__(self, train_series):
        pooled = np.concatenate(train_series, axis=1)
        self.mean = pooled.mean(axis=1)
        std = pooled.std(axis=1)
        self.std = np.where(std < 1e-12, 1.0, std)

    def apply(self, series):
        return [(s - self.mean[:, None]) / self.std[:, None] for s in series]


class _DtwKnnFit:
    def __init__(self, cache, train_idx, hp, seed):
        self.train_idx = np.asarray(train_idx)
        series = cache.native_series()
        self.norm = _ChannelNorm([series[i] for i in self.train_idx])
        self.train_series = self.norm.apply([series[i] for i in self.train_idx])
        self.train_labels = cache.intentions[self.train_idx]
        self.k = int(hp["knn_k"])

    def predict(self, cache, idx):
        series = cache.native_series()
        test = self.norm.apply([series[i] for i in idx])
        dist = dtwmod.cross_distances(test, self.train_series)
        return dtwmod.knn_classify(
            dist,
            np.arange(len(self.train_series)),
            self.train_labels,
            np.arange(len(test)),
            k=self.k,
        )

    def state(self):
        return {
            "norm.mean": self.norm.mean,
            "norm.std": self.norm.std,
            "labels": self.train_labels,
            "k": self.k,
        }


class _DtwLaplacianFit:
    def __init__(self, cache, train_idx, hp, seed):
        self.train_idx = np.asarray(train_idx)
        series = cache.native_series()
        self.norm = _ChannelNorm([series[i] for i in self.train_idx])
        self.train_series = self.norm.apply([series[i] for i in self.train_idx])
        dist = dtwmod.distance_matrix(self.train_series)
        sigma = hp["sigma"]
        self.sigma = (
            dtwmod.median_heuristic_sigma(dist) if sigma == "median" else float(sigma)
        )
        self.embedding = dtwmod.LaplacianEmbedding(dist, self.sigma)
        gram = self.embedding.train_features @ self.embedding.train_features.T
        self.scale = _trace_scale(gram)
        self.model = svmmod.train_ovr(
            gram * self.scale, cache.intentions[self.train_idx],
            C=hp["C"], tol=hp["tol"], precomputed=True,
        )

    def predict(self, cache, idx):
        series = cache.native_series()
        test = self.norm.apply([series[i] for i in idx])
        dist = dtwmod.cross_distances(test, self.train_series)
        rows = self.embedding.extend_gram_rows(dist) * self.scale
        return self.model.predict(rows)

    def state(self):
        out = {
            "norm.mean": self.norm.mean,
            "norm.std": self.norm.std,
            "sigma": self.sigma,
            "embedding.features": self.embedding.train_features,
        }
        out.update(_svm_state("svm", self.model))
        return out


class _KercovFit:
    def __init__(self, cache, train_idx, hp, seed):
        self.train_idx = np.asarray(train_idx)
        self.n_lift = int(hp["n_lift"])
        self.lift_seed = int(hp["lift_seed"])
        frames = cache.raw_frames()
        train_frames = [frames[i] for i in self.train_idx]
        scale = spdcov.median_frame_distance(train_frames)
        grid = spdcov.bandwidth_grid(scale, hp["gamma_powers"])
        labels = cache.intentions[self.train_idx]
        folds = fus._cv_folds(len(self.train_idx), int(hp["cv_folds"]), seed)
        best_acc, best_gamma = -1.0, grid[0]
        for gamma in grid:
            vectors = spdcov.kercov_vectors(
                train_frames, gamma, n_lift=self.n_lift, seed=self.lift_seed
            )
            gram = vectors @ vectors.T
            gram *= _trace_scale(gram)
            try:
                acc, _ = fus._kernel_cv_metrics(gram, labels, folds, hp["C"])
            except SingleClass:
                continue
            if acc > best_acc:
                best_acc, best_gamma = acc, gamma
        self.gamma = best_gamma
        all_vectors = cache.kercov_matrix(self.gamma, self.n_lift, self.lift_seed)
        self.train_vectors = all_vectors[self.train_idx]
        gram = self.train_vectors @ self.train_vectors.T
        self.scale = _trace_scale(gram)
        self.model = svmmod.train_ovr(
            gram * self.scale, labels, C=hp["C"], tol=hp["tol"], precomputed=True
        )

    def predict(self, cache, idx):
        vectors = cache.kercov_matrix(self.gamma, self.n_lift, self.lift_seed)[idx]
        rows = (vectors @ self.train_vectors.T) * self.scale
        return self.model.predict(rows)

    def state(self):
        out = {
            "gamma": self.gamma,
            "n_lift": self.n_lift,
            "lift_seed": self.lift_seed,
            "train_vectors": self.train_vectors,
        }
        out.update(_svm_state("svm", self.model))
        return out


def _block_matrix(name, cache, hp, seed, train_idx=None, fitted=None):
    """Feature-block matrix; per-trial blocks ignore train_idx, kercov fits its
    bandwidth on training frames (or reuses a previously fitted one)."""
    if name in ("fk", "fglobal", "flocal", "cov", "cov16", "hcov", "hcov16"):
        return cache.matrix(name, hp), {}
    if name == "kercov":
        n_lift = int(hp.get("n_lift", 128))
        lift_seed = int(hp.get("lift_seed", 12345))
        if fitted is not None:
            gamma = fitted["kercov.gamma"]
        else:
            frames = cache.raw_frames()
            gamma = spdcov.median_frame_distance([frames[i] for i in train_idx])
        return (
            cache.kercov_matrix(gamma, n_lift, lift_seed),
            {"kercov.gamma": float(gamma)},
        )
    raise InvalidConfig(f"unknown feature block {name!r}")


class _EarlyFusionFit:
    """Concatenate blocks (train-fitted normalization) then CMIM or PCA, then
    linear OvR on the reduced representation."""

    def __init__(self, cache, train_idx, hp, seed, mode: str):
        self.mode = mode
        self.hp = hp
        self.block_names = tuple(hp["blocks"])
        train_idx = np.asarray(train_idx)
        blocks = []
        self.block_fitted = {}
        for name in self.block_names:
            m, fitted = _block_matrix(name, cache, hp, seed, train_idx=train_idx)
            blocks.append(fus.FeatureBlock(name, m))
            self.block_fitted.update(fitted)
        x, self.stats = fus.concat_blocks(blocks, train_idx)
        labels = cache.intentions[train_idx]
        if mode == "cmim":
            k = min(int(hp["k_cmim"]), x.shape[1])
            self.selected = fus.cmim_select(
                x[train_idx], labels, k=k, bins=int(hp["cmim_bins"])
            )
            reduced = x[:, self.selected]
            self.pca = None
        else:
            k = int(hp["pca_k"])
            self.pca = fus.pca_reduce(x[train_idx], x, k)
            reduced = self.pca.applied
            self.selected = None
        self.reduced_stats = fus.fit_column_stats(reduced, train_idx)
        reduced = _unit_scale(self.reduced_stats.apply(reduced))
        self.model = svmmod.train_ovr(
            reduced[train_idx], labels, C=hp["C"], tol=hp["tol"]
        )
        self._reduced = reduced

    def predict(self, cache, idx):
        return self.model.predict(self._reduced[idx])

    def state(self):
        out = {"stats.mean": self.stats.mean, "stats.std": self.stats.std}
        out["reduced.mean"] = self.reduced_stats.mean
        out["reduced.std"] = self.reduced_stats.std
        out.update(self.block_fitted)
        if self.selected is not None:
            out["cmim.selected"] = self.selected
        if self.pca is not None:
            out["pca.components"] = self.pca.components
            out["pca.mean"] = self.pca.mean
        out.update(_svm_state("svm", self.model))
        return out


class _KernelPiece:
    """One component kernel for late fusion: a train Gram plus a row extender."""

    def __init__(self, name, train_gram, rows_fn, fitted):
        self.name = name
        self.train_gram = train_gram
        self.rows = rows_fn
        self.fitted = fitted


def _rbf_piece(name, block, cache, train_idx, hp, seed):
    x = cache.matrix(block, hp)
    stats = fus.fit_column_stats(x, train_idx)
    xn = stats.apply(x)
    train = xn[train_idx]
    dists = pdist(train)
    sigma = float(np.median(dists)) if dists.size and np.median(dists) > 0 else 1.0
    gram = np.exp(-squareform(dists) ** 2 / (2 * sigma**2))
    ids = tuple(cache.ids[i] for i in train_idx)
    piece_gram = dtwmod.GramMatrix(gram, ids, {"kind": name, "sigma": sigma})

    def rows(idx):
        d = cdist(xn[idx], train)
        return np.exp(-(d**2) / (2 * sigma**2))

    fitted = {f"{name}.mean": stats.mean, f"{name}.std": stats.std, f"{name}.sigma": sigma}
    return _KernelPiece(name, piece_gram, rows, fitted)


def _linear_piece(name, block, cache, train_idx, hp, seed):
    x = cache.matrix(block, hp)
    stats = fus.fit_column_stats(x, train_idx)
    xn = stats.apply(x)
    train = xn[train_idx]
    ids = tuple(cache.ids[i] for i in train_idx)
    piece_gram = dtwmod.GramMatrix(train @ train.T, ids, {"kind": name})

    def rows(idx):
        return xn[idx] @ train.T

    fitted = {f"{name}.mean": stats.mean, f"{name}.std": stats.std}
    return _KernelPiece(name, piece_gram, rows, fitted)


def _kercov_piece(cache, train_idx, hp, seed):
    frames = cache.raw_frames()
    gamma = spdcov.median_frame_distance([frames[i] for i in train_idx])
    n_lift = int(hp.get("n_lift", 128))
    lift_seed = int(hp.get("lift_seed", 12345))
    vectors = cache.kercov_matrix(gamma, n_lift, lift_seed)
    train = vectors[train_idx]
    ids = tuple(cache.ids[i] for i in train_idx)
    piece_gram = dtwmod.GramMatrix(
        train @ train.T, ids, {"kind": "kercov", "gamma": gamma}
    )

    def rows(idx):
        return vectors[idx] @ train.T

    return _KernelPiece("kercov", piece_gram, rows, {"kercov.gamma": float(gamma)})


def _dtw_piece(cache, train_idx, hp, seed):
    series = cache.native_series()
    norm = _ChannelNorm([series[i] for i in train_idx])
    train_series = norm.apply([series[i] for i in train_idx])
    dist = dtwmod.distance_matrix(train_series)
    sigma = dtwmod.median_heuristic_sigma(dist)
    embedding = dtwmod.LaplacianEmbedding(dist, sigma)
    ids = tuple(cache.ids[i] for i in train_idx)
    piece_gram = embedding.train_gram(ids)

    def rows(idx):
        test = norm.apply([series[i] for i in idx])
        return embedding.extend_gram_rows(dtwmod.cross_distances(test, train_series))

    fitted = {
        "dtw-laplacian.mean": norm.mean,
        "dtw-laplacian.std": norm.std,
        "dtw-laplacian.sigma": sigma,
        "dtw-laplacian.features": embedding.train_features,
    }
    return _KernelPiece("dtw-laplacian", piece_gram, rows, fitted)


def _build_kernel_piece(name, cache, train_idx, hp, seed):
    if name.endswith("-rbf"):
        return _rbf_piece(name, name[: -len("-rbf")], cache, train_idx, hp, seed)
    if name.endswith("-linear"):
        return _linear_piece(name, name[: -len("-linear")], cache, train_idx, hp, seed)
    if name == "kercov":
        return _kercov_piece(cache, train_idx, hp, seed)
    if name == "dtw-laplacian":
        return _dtw_piece(cache, train_idx, hp, seed)
    raise InvalidConfig(f"unknown kernel {name!r}")


class _LateFusionFit:
    def __init__(self, cache, train_idx, hp, seed):
        train_idx = np.asarray(train_idx)
        labels = cache.intentions[train_idx]
        self.pieces = [
            _build_kernel_piece(name, cache, train_idx, hp, seed)
            for name in hp["kernels"]
        ]
        grams = [p.train_gram for p in self.pieces]
        fused, self.weights = fus.late_fuse(
            grams,
            labels,
            criterion=hp["fusion_criterion"],
            C=hp["C"],
            folds=int(hp["cv_folds"]),
            seed=seed,
        )
        self.scales = [fus.trace_normalize(g)[1] for g in grams]
        self.model = svmmod.train_ovr(
            fused.values, labels, C=hp["C"], tol=hp["tol"], precomputed=True
        )

    def predict(self, cache, idx):
        rows = sum(
            w * s * p.rows(idx)
            for w, s, p in zip(self.weights.weights, self.scales, self.pieces)
        )
        return self.model.predict(rows)

    def state(self):
        out = {"fusion.weights": self.weights.weights, "fusion.scales": tuple(self.scales)}
        for p in self.pieces:
            out.update(p.fitted)
        out.update(_svm_state("svm", self.model))
        return out


def fit_pipeline(cache: FeatureCache, train_idx, spec: PipelineSpec, seed: int):
    """Fit the representation named by the spec on the training rows."""
    hp = spec.resolved()
    rep = spec.representation
    if rep == "majority":
        return _MajorityFit(cache, train_idx, hp, seed)
    if rep in ("fk", "fglobal", "flocal", "cov", "hcov"):
        block = {"cov": "cov", "hcov": "hcov"}.get(rep, rep)
        if rep in ("cov", "hcov") and hp.get("cov_mode") == "channels":
            block = block + "16"
        return _VectorFit(cache, train_idx, hp, seed, block)
    if rep == "dtw-knn":
        return _DtwKnnFit(cache, train_idx, hp, seed)
    if rep == "dtw-laplacian-svm":
        return _DtwLaplacianFit(cache, train_idx, hp, seed)
    if rep == "kercov":
        return _KercovFit(cache, train_idx, hp, seed)
    if rep == "cmim-fused":
        return _EarlyFusionFit(cache, train_idx, hp, seed, mode="cmim")
    if rep == "pca-fused":
        return _EarlyFusionFit(cache, train_idx, hp, seed, mode="pca")
    if rep == "late-fused":
        return _LateFusionFit(cache, train_idx, hp, seed)
    raise InvalidConfig(f"unknown representation {rep!r}")


# --- evaluation reports -----------------------------------------------------------

@dataclass
class FoldResult:
    fold: str
    accuracy: float
    n_test: int
    confusion: np.ndarray
    state_digest: str | None = None


@dataclass
class EvalReport:
    spec: dict
    seed: int
    class_codes: list[int]
    folds: list[FoldResult]
    mean_accuracy: float
    confusion: np.ndarray
    precision: dict[str, float]
    recall: dict[str, float]
    warnings: list[str]
    wall_time_s: float

    @property
    def class_labels(self) -> list[str]:
        return [Intention(c).label for c in self.class_codes]

    def to_json_dict(self) -> dict:
        # Wall time deliberately left out so rerun outputs are bit-identical.
        return {
            "spec": self.spec,
            "seed": self.seed,
            "class_labels": self.class_labels,
            "folds": [
                {
                    "fold": f.fold,
                    "accuracy": f.accuracy,
                    "n_test": f.n_test,
                    "confusion": f.confusion.tolist(),
                }
                for f in self.folds
            ],
            "mean_accuracy": self.mean_accuracy,
            "confusion": self.confusion.tolist(),
            "precision": self.precision,
            "recall": self.recall,
            "warnings": self.warnings,
        }


def _confusion(true, pred, class_codes) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_codes)}
    out = np.zeros((len(class_codes), len(class_codes)), dtype=np.int64)
    for t, p in zip(true, pred):
        out[index[int(t)], index[int(p)]] += 1
    return out


def loso_evaluate(
    dataset: Dataset,
    spec: PipelineSpec,
    seed: int = 0,
    fraction: float = 1.0,
    jobs: int = 1,
    capture_state: bool = False,
    cache: FeatureCache | None = None,
) -> EvalReport:
    """Leave-one-subject-out evaluation: one fold per subject, everything
    fitted on the remaining subjects."""
    t_start = time.perf_counter()
    hp = spec.resolved()
    if cache is None:
        cache = build_cache(dataset, hp, fraction=fraction)
    if spec.classes is None:
        sel = np.arange(cache.n)
    else:
        wanted = [int(c) for c in spec.classes]
        sel = np.flatnonzero(np.isin(cache.intentions, wanted))
    class_codes = sorted(set(cache.intentions[sel].tolist()))
    subjects = sorted(set(cache.subjects[sel].tolist()))
    if len(subjects) < 2:
        raise InvalidConfig("leave-one-subject-out needs at least 2 subjects")
    warnings: list[str] = []

    def run_fold(subject):
        test_idx = sel[cache.subjects[sel] == subject]
        train_idx = sel[cache.subjects[sel] != subject]
        try:
            fitted = fit_pipeline(cache, train_idx, spec, fold_seed(seed, subject))
        except SingleClass as exc:
            return subject, None, str(exc)
        pred = fitted.predict(cache, test_idx)
        true = cache.intentions[test_idx]
        conf = _confusion(true, pred, class_codes)
        fold = FoldResult(
            fold=f"subject-{subject}",
            accuracy=float(np.mean(pred == true)),
            n_test=int(test_idx.size),
            confusion=conf,
            state_digest=state_digest(fitted.state()) if capture_state else None,
        )
        return subject, fold, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, subjects))
    else:
        results = [run_fold(s) for s in subjects]

    folds = []
    for subject, fold, error in results:
        if fold is None:
            warnings.append(f"fold subject-{subject} skipped: {error}")
        else:
            folds.append(fold)
    if not folds:
        raise SingleClass("no fold was trainable")
    total = np.sum([f.confusion for f in folds], axis=0)
    mean_acc = float(np.mean([f.accuracy for f in folds]))
    precision, recall = {}, {}
    for i, c in enumerate(class_codes):
        label = Intention(c).label
        col = total[:, i].sum()
        row = total[i, :].sum()
        precision[label] = float(total[i, i] / col) if col else 0.0
        recall[label] = float(total[i, i] / row) if row else 0.0
    return EvalReport(
        spec=spec.to_json_dict(),
        seed=seed,
        class_codes=class_codes,
        folds=folds,
        mean_accuracy=mean_acc,
        confusion=total,
        precision=precision,
        recall=recall,
        warnings=warnings,
        wall_time_s=time.perf_counter() - t_start,
    )


def all_comparisons() -> list[tuple[str, tuple[Intention, ...] | None]]:
    """The 6 intention pairs (enum order) followed by the all-class comparison."""
    pairs = [
        (f"{a.label}|{b.label}", (a, b))
        for a, b in itertools.combinations(Intention, 2)
    ]
    return pairs + [("all", None)]


def comparison_suite(
    dataset: Dataset, spec: PipelineSpec, seed: int = 0, fraction: float = 1.0,
    jobs: int = 1, cache: FeatureCache | None = None,
) -> dict[str, EvalReport]:
    """Run the 6 pairwise comparisons plus all-class with shared hyperparameters."""
    if cache is None:
        cache = build_cache(dataset, spec.resolved(), fraction=fraction)
    reports = {}
    for name, classes in all_comparisons():
        sub_spec = PipelineSpec(spec.representation, dict(spec.hyperparams), classes)
        reports[name] = loso_evaluate(
            dataset, sub_spec, seed=seed, jobs=jobs, cache=cache
        )
    return reports


def snippet_sweep(
    dataset: Dataset,
    spec: PipelineSpec,
    fractions=(0.2, 0.4, 0.6, 0.8, 1.0),
    seed: int = 0,
    suite: bool = True,
    jobs: int = 1,
):
    """Truncate every trial to each initial fraction and re-evaluate.

    With ``suite=True`` each fraction runs the full 7-way comparison grid;
    otherwise only the comparison selected by the spec.  Trials are
    conditioned once and re-truncated per fraction."""
    base = build_cache(dataset, spec.resolved())
    table = {}
    for fraction in fractions:
        cache = base.with_fraction(fraction)
        if suite:
            table[fraction] = comparison_suite(
                dataset, spec, seed=seed, jobs=jobs, cache=cache
            )
        else:
            table[fraction] = loso_evaluate(
                dataset, spec, seed=seed, jobs=jobs, cache=cache
            )
    return table


# --- two-layer architecture -------------------------------------------------------

TWO_LAYER_DEFAULTS = {
    "C": 10.0,
    "tol": 1e-3,
    "epsilon": 20.0,
    "cutoff_hz": 6.0,
    "n_samples": 100,
    "blocks": ["fk", "hcov16"],
    "k_cmim": 150,
    "cmim_bins": 10,
}


def _resolve_two_layer_hp(hp: dict | None) -> dict:
    out = dict(TWO_LAYER_DEFAULTS)
    if hp:
        unknown = set(hp) - set(TWO_LAYER_DEFAULTS)
        if unknown:
            raise InvalidConfig(f"unknown two-layer hyperparameters: {sorted(unknown)}")
        out.update(hp)
    return out


def stratified_split(subjects, intentions, seed: int, train_fraction: float = 2 / 3):
    """Per-(subject, intention) split preserving cell proportions within one trial."""
    subjects = np.asarray(subjects)
    intentions = np.asarray(intentions)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for s in sorted(set(subjects.tolist())):
        for c in sorted(set(intentions.tolist())):
            cell = np.flatnonzero((subjects == s) & (intentions == c))
            if cell.size < 3:
                raise InsufficientCell(
                    f"cell (subject {s}, class {c}) has {cell.size} trials; need >= 3"
                )
            perm = rng.permutation(cell)
            n_tr = int(round(train_fraction * cell.size))
            n_tr = max(2, min(n_tr, cell.size - 1))
            train.extend(perm[:n_tr].tolist())
            test.extend(perm[n_tr:].tolist())
    return np.array(sorted(train)), np.array(sorted(test))


@dataclass
class TwoLayerModel:
    """Layer 1 routes to a per-subject intention predictor in layer 2."""

    hp: dict
    subjects: np.ndarray
    layer1_stats: fus.ColumnStats
    layer1: svmmod.OvrModel
    concat_stats: fus.ColumnStats
    reduced_stats: fus.ColumnStats
    block_fitted: dict
    cmim_selected: np.ndarray
    layer2: dict[int, svmmod.OvrModel]
    train_idx: np.ndarray
    test_idx: np.ndarray
    marker_map: MarkerMap
    classes: tuple[Intention, ...] | None = None

    def fk_rows(self, fk_matrix: np.ndarray) -> np.ndarray:
        return _unit_scale(self.layer1_stats.apply(fk_matrix))

    def reduced_rows(self, raw_concat: np.ndarray) -> np.ndarray:
        sel = self.concat_stats.apply(raw_concat)[:, self.cmim_selected]
        return _unit_scale(self.reduced_stats.apply(sel))

    def state(self) -> dict:
        out = {
            "layer1.mean": self.layer1_stats.mean,
            "layer1.std": self.layer1_stats.std,
            "concat.mean": self.concat_stats.mean,
            "concat.std": self.concat_stats.std,
            "reduced.mean": self.reduced_stats.mean,
            "reduced.std": self.reduced_stats.std,
            "cmim.selected": self.cmim_selected,
        }
        out.update(self.block_fitted)
        out.update(_svm_state("layer1", self.layer1))
        for s, model in sorted(self.layer2.items()):
            out.update(_svm_state(f"layer2.{s}", model))
        return out


def _two_layer_features(cache: FeatureCache, hp: dict, train_idx, block_fitted=None):
    """(fk matrix, concatenated block matrix before normalization, fitted info)."""
    fk = cache.matrix("fk", hp)
    blocks = []
    fitted = {}
    for name in hp["blocks"]:
        m, f = _block_matrix(
            name, cache, hp, 0, train_idx=train_idx, fitted=block_fitted
        )
        blocks.append(fus.FeatureBlock(name, m))
        fitted.update(f)
    raw = np.concatenate([b.matrix for b in blocks], axis=1)
    return fk, raw, fitted


def _fit_two_layer(cache: FeatureCache, hp: dict, train_idx, test_idx, marker_map,
                   classes=None) -> TwoLayerModel:
    fk, raw, block_fitted = _two_layer_features(cache, hp, train_idx)
    layer1_stats = fus.fit_column_stats(fk, train_idx)
    layer1 = svmmod.train_ovr(
        _unit_scale(layer1_stats.apply(fk[train_idx])),
        cache.subjects[train_idx],
        C=hp["C"],
        tol=hp["tol"],
    )
    concat_stats = fus.fit_column_stats(raw, train_idx)
    xn = concat_stats.apply(raw)
    k = min(int(hp["k_cmim"]), xn.shape[1])
    selected = fus.cmim_select(
        xn[train_idx], cache.intentions[train_idx], k=k, bins=int(hp["cmim_bins"])
    )
    picked = xn[:, selected]
    reduced_stats = fus.fit_column_stats(picked, train_idx)
    reduced = _unit_scale(reduced_stats.apply(picked))
    layer2 = {}
    for s in sorted(set(cache.subjects[train_idx].tolist())):
        rows = train_idx[cache.subjects[train_idx] == s]
        layer2[int(s)] = svmmod.train_ovr(
            reduced[rows], cache.intentions[rows], C=hp["C"], tol=hp["tol"]
        )
    return TwoLayerModel(
        hp=hp,
        subjects=np.array(sorted(layer2)),
        layer1_stats=layer1_stats,
        layer1=layer1,
        concat_stats=concat_stats,
        reduced_stats=reduced_stats,
        block_fitted=block_fitted,
        cmim_selected=selected,
        layer2=layer2,
        train_idx=np.asarray(train_idx),
        test_idx=np.asarray(test_idx),
        marker_map=marker_map,
        classes=classes,
    )


def two_layer_train(dataset: Dataset, split_seed: int, hp: dict | None = None) -> TwoLayerModel:
    """Stratified 2/3-1/3 split, then layer-1 subject SVM plus per-subject
    layer-2 intention SVMs on CMIM-selected fused features."""
    hp = _resolve_two_layer_hp(hp)
    cache = build_cache(dataset, hp)
    train_idx, test_idx = stratified_split(
        cache.subjects, cache.intentions, seed=fold_seed(split_seed)
    )
    return _fit_two_layer(cache, hp, train_idx, test_idx, dataset.marker_map)


def _predict_two_layer_rows(model: TwoLayerModel, fk_conditioned, reduced_conditioned):
    subjects = model.layer1.predict(fk_conditioned)
    intentions = np.empty(len(subjects), dtype=np.int64)
    for i, s in enumerate(subjects):
        intentions[i] = model.layer2[int(s)].predict(reduced_conditioned[i : i + 1])[0]
    return subjects, intentions


def two_layer_predict(model: TwoLayerModel, trial: Trial) -> tuple[int, Intention]:
    """Route one trial: layer 1 estimates the subject, that subject's layer-2
    model predicts the intention."""
    cache = FeatureCache(
        [trial],
        model.marker_map,
        epsilon=model.hp["epsilon"],
        cutoff_hz=model.hp["cutoff_hz"],
        n_samples=model.hp["n_samples"],
    )
    fk, raw, _ = _two_layer_features(
        cache, model.hp, train_idx=None, block_fitted=model.block_fitted
    )
    subjects, intentions = _predict_two_layer_rows(
        model, model.fk_rows(fk), model.reduced_rows(raw)
    )
    return int(subjects[0]), Intention(int(intentions[0]))


@dataclass
class TwoLayerComparison:
    comparison: str
    layer1_accuracies: list[float]
    intent_accuracies: list[float]
    oracle_accuracies: list[float]
    flat_accuracies: list[float]

    @property
    def layer1_mean(self) -> float:
        return float(np.mean(self.layer1_accuracies))

    @property
    def intent_mean(self) -> float:
        return float(np.mean(self.intent_accuracies))

    @property
    def oracle_mean(self) -> float:
        return float(np.mean(self.oracle_accuracies))

    @property
    def flat_mean(self) -> float:
        return float(np.mean(self.flat_accuracies)) if self.flat_accuracies else float("nan")


@dataclass
class TwoLayerReport:
    seed: int
    repeats: int
    hp: dict
    comparisons: dict[str, TwoLayerComparison]
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repeats": self.repeats,
            "hyperparams": {k: v for k, v in self.hp.items()},
            "comparisons": {
                name: {
                    "layer1_mean": c.layer1_mean,
                    "intent_mean": c.intent_mean,
                    "oracle_mean": c.oracle_mean,
                    "flat_mean": None if np.isnan(c.flat_mean) else c.flat_mean,
                    "layer1_accuracies": c.layer1_accuracies,
                    "intent_accuracies": c.intent_accuracies,
                    "oracle_accuracies": c.oracle_accuracies,
                    "flat_accuracies": c.flat_accuracies,
                }
                for name, c in self.comparisons.items()
            },
        }


def two_layer_evaluate(
    dataset: Dataset,
    repeats: int = 20,
    seed: int = 0,
    hp: dict | None = None,
    comparisons=None,
    include_flat: bool = True,
) -> TwoLayerReport:
    """Repeat stratified splits and report layer-1 (subject), end-to-end
    intention, oracle-routed, and flat-baseline accuracies per comparison."""
    t_start = time.perf_counter()
    hp = _resolve_two_layer_hp(hp)
    cache = build_cache(dataset, hp)
    wanted = comparisons if comparisons is not None else [n for n, _ in all_comparisons()]
    available = dict(all_comparisons())
    out: dict[str, TwoLayerComparison] = {}
    for comp_i, name in enumerate(wanted):
        classes = available[name]
        if classes is None:
            sel = np.arange(cache.n)
        else:
            codes = {int(c) for c in classes}
            sel = np.flatnonzero(np.isin(cache.intentions, sorted(codes)))
        comp = TwoLayerComparison(name, [], [], [], [])
        for r in range(repeats):
            split_seed = fold_seed(seed, comp_i, r)
            tr_local, te_local = stratified_split(
                cache.subjects[sel], cache.intentions[sel], seed=split_seed
            )
            train_idx, test_idx = sel[tr_local], sel[te_local]
            model = _fit_two_layer(
                cache, hp, train_idx, test_idx, dataset.marker_map, classes
            )
            fk = cache.matrix("fk", hp)
            _, raw, _ = _two_layer_features(
                cache, hp, train_idx=None, block_fitted=model.block_fitted
            )
            fk_cond = model.fk_rows(fk)
            reduced = model.reduced_rows(raw)
            sub_pred, int_pred = _predict_two_layer_rows(
                model, fk_cond[test_idx], reduced[test_idx]
            )
            true_sub = cache.subjects[test_idx]
            true_int = cache.intentions[test_idx]
            comp.layer1_accuracies.append(float(np.mean(sub_pred == true_sub)))
            comp.intent_accuracies.append(float(np.mean(int_pred == true_int)))
            oracle = np.array(
                [
                    model.layer2[int(s)].predict(reduced[t : t + 1])[0]
                    for s, t in zip(true_sub, test_idx)
                ]
            )
            comp.oracle_accuracies.append(float(np.mean(oracle == true_int)))
            if include_flat:
                flat = svmmod.train_ovr(
                    reduced[train_idx],
                    cache.intentions[train_idx],
                    C=hp["C"],
                    tol=hp["tol"],
                )
                flat_pred = flat.predict(reduced[test_idx])
                comp.flat_accuracies.append(float(np.mean(flat_pred == true_int)))
        out[name] = comp
    return TwoLayerReport(
        seed=seed,
        repeats=repeats,
        hp=hp,
        comparisons=out,
        wall_time_s=time.perf_counter() - t_start,
    )
