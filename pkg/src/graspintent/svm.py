"""Soft-margin SVM training on features or precomputed Gram matrices.

The dual is solved by sequential minimal optimization with max-violating-pair
working-set selection; argmax ties resolve to the lowest index, so training is
deterministic given the input order.  One-vs-rest multiclass predicts the
argmax decision value with ties going to the lowest class code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NotLinear,
    SingleClass,
)

DEFAULT_C = 10.0
DEFAULT_TOL = 1e-4
# Budget of kernel-matrix accesses per binary problem (2 columns per step).
MAX_KERNEL_EVALS = 10**8
_SV_EPS_FACTOR = 1e-8
WEIGHT_THRESHOLD = 1e-3


@dataclass
class SvmModel:
    """A trained binary classifier; predicts +1 when the decision value >= 0."""

    kind: str  # "linear" | "kernel"
    C: float
    b: float
    alpha: np.ndarray
    y: np.ndarray
    support: np.ndarray
    w: np.ndarray | None = None
    n_train: int = 0

    def decision_values(self, data) -> np.ndarray:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if self.kind == "linear":
            if data.shape[1] != self.w.shape[0]:
                raise DimensionMismatch(
                    f"expected {self.w.shape[0]} features, got {data.shape[1]}"
                )
            return data @ self.w + self.b
        if data.shape[1] != self.n_train:
            raise DimensionMismatch(
                f"kernel rows must have {self.n_train} columns, got {data.shape[1]}"
            )
        return data @ (self.alpha * self.y) + self.b

    def predict(self, data) -> np.ndarray:
        return np.where(self.decision_values(data) >= 0, 1, -1)


@dataclass
class OvrModel:
    """One binary model per class; prediction is the argmax decision value."""

    classes: np.ndarray
    models: list[SvmModel]
    kind: str

    def decision_values(self, data) -> np.ndarray:
        return np.column_stack([m.decision_values(data) for m in self.models])

    def predict(self, data) -> np.ndarray:
        scores = self.decision_values(data)
        return self.classes[np.argmax(scores, axis=1)]


@njit(cache=True, nogil=True)
def _smo_core(kernel, y, C, tol, max_iter):  # pragma: no cover - via _smo
    n = y.shape[0]
    ya = np.zeros(n)  # y_i * alpha_i
    yg = y.copy()  # y_i * grad_i, grad = 1 - Q alpha
    hi = np.empty(n)
    lo = np.empty(n)
    for t in range(n):
        if y[t] > 0:
            hi[t] = C
            lo[t] = 0.0
        else:
            hi[t] = 0.0
            lo[t] = -C
    for _ in range(max_iter):
        # i: maximal violator among coordinates that can move up; strict
        # comparisons keep ties at the lowest index.
        i = -1
        i_val = -np.inf
        j_val = np.inf
        any_down = False
        for t in range(n):
            if ya[t] < hi[t] - 1e-12 and yg[t] > i_val:
                i_val = yg[t]
                i = t
            if ya[t] > lo[t] + 1e-12:
                any_down = True
                if yg[t] < j_val:
                    j_val = yg[t]
        if i < 0 or not any_down:
            return ya, yg, 0
        if i_val - j_val <= tol:
            return ya, yg, 0
        # j: largest second-order gain among eligible partners.
        ki = kernel[i]
        j = -1
        best = np.inf
        for t in range(n):
            if ya[t] > lo[t] + 1e-12:
                gap = i_val - yg[t]
                if gap > 0:
                    den = ki[i] + kernel[t, t] - 2.0 * ki[t]
                    if den < 1e-12:
                        den = 1e-12
                    score = -(gap * gap) / den
                    if score < best:
                        best = score
                        j = t
        kj = kernel[j]
        den = ki[i] + kj[j] - 2.0 * ki[j]
        if den < 1e-12:
            den = 1e-12
        step = (i_val - yg[j]) / den
        if hi[i] - ya[i] < step:
            step = hi[i] - ya[i]
        if ya[j] - lo[j] < step:
            step = ya[j] - lo[j]
        ya[i] += step
        ya[j] -= step
        for t in range(n):
            yg[t] -= step * (ki[t] - kj[t])
    return ya, yg, 1


def _smo(kernel: np.ndarray, y: np.ndarray, C: float, tol: float):
    """SMO on a precomputed kernel; returns (alpha, b).

    The first index is the maximal violator; its partner is picked by the
    second-order gain rule.  Convergence is declared when the max-violating
    pair gap drops to tol; ties resolve to the lowest index, so training is
    deterministic given the input order.
    """
    n = y.shape[0]
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    max_iter = max(1, int(MAX_KERNEL_EVALS // max(1, 2 * n)))
    ya, yg, status = _smo_core(kernel, y.astype(np.float64), float(C), float(tol), max_iter)
    if status != 0:
        raise NoConvergence(
            f"SMO exhausted {MAX_KERNEL_EVALS} kernel evaluations (n={n})"
        )
    alpha = y * ya
    eps = _SV_EPS_FACTOR * C
    free = (alpha > eps) & (alpha < C - eps)
    hi = np.where(y > 0, C, 0.0)
    lo = np.where(y > 0, 0.0, -C)
    if free.any():
        b = float(yg[free].mean())
    else:
        up = ya < hi - 1e-12
        down = ya > lo + 1e-12
        b_lo = yg[up].max() if up.any() else 0.0
        b_hi = yg[down].min() if down.any() else 0.0
        b = 0.5 * float(b_lo + b_hi)
    return alpha, b


def train_binary(
    data,
    y,
    C: float = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    precomputed: bool = False,
) -> SvmModel:
    """Train a binary soft-margin SVM on features or a precomputed Gram."""
    data = np.asarray(data, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 2:
        raise SingleClass("need at least two training points")
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise SingleClass(f"labels must contain both -1 and +1, got {np.unique(y)}")
    if data.shape[0] != n:
        raise DimensionMismatch("data rows must match label count")
    if precomputed:
        if data.shape != (n, n):
            raise DimensionMismatch(f"precomputed Gram must be ({n}, {n})")
        kernel = data
    else:
        kernel = data @ data.T
    alpha, b = _smo(kernel, y, C, tol)
    eps = _SV_EPS_FACTOR * C
    support = np.flatnonzero(alpha > eps)
    w = None if precomputed else data.T @ (alpha * y)
    return SvmModel(
        kind="kernel" if precomputed else "linear",
        C=float(C),
        b=b,
        alpha=alpha,
        y=y.copy(),
        support=support,
        w=w,
        n_train=n,
    )


def train_ovr(
    data,
    labels,
    C: float = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    precomputed: bool = False,
) -> OvrModel:
    """One-vs-rest multiclass training."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise SingleClass(f"need at least two classes, got {classes}")
    models = []
    for c in classes:
        y = np.where(labels == c, 1.0, -1.0)
        models.append(train_binary(data, y, C=C, tol=tol, precomputed=precomputed))
    return OvrModel(classes=classes, models=models, kind=models[0].kind)


def decision_values(model, data) -> np.ndarray:
    return model.decision_values(data)


def predict(model, data) -> np.ndarray:
    return model.predict(data)


def dual_objective(kernel: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """Value of the soft-margin dual at alpha."""
    ya = alpha * y
    return float(alpha.sum() - 0.5 * ya @ kernel @ ya)


def kkt_violation(kernel: np.ndarray, y: np.ndarray, alpha: np.ndarray, C: float) -> float:
    """Max-violating-pair gap; <= tol at an (approximately) optimal point."""
    ya = alpha * y
    yg = y - kernel @ ya
    hi = np.where(y > 0, C, 0.0)
    lo = np.where(y > 0, 0.0, -C)
    up = ya < hi - 1e-12
    down = ya > lo + 1e-12
    if not up.any() or not down.any():
        return 0.0
    return float(yg[up].max() - yg[down].min())


@dataclass
class WeightReport:
    """Thresholded, per-class rescaled linear weights in [-1, 1].

    ``intention_specific`` lists, per class, the components whose scaled
    magnitude reaches 0.5 for that class and no other.
    """

    classes: np.ndarray
    scaled: np.ndarray  # (n_classes, d)
    threshold: float
    intention_specific: dict[int, list[int]] = field(default_factory=dict)


def mine_weights(model: OvrModel, threshold: float = WEIGHT_THRESHOLD) -> WeightReport:
    """Zero sub-threshold weights, rescale each class to max |w| = 1, and flag
    components that are strongly discriminative for exactly one class."""
    if model.kind != "linear":
        raise NotLinear("weight mining requires a linear one-vs-rest model")
    rows = []
    for m in model.models:
        v = m.w.copy()
        v[np.abs(v) < threshold] = 0.0
        peak = np.abs(v).max()
        if peak > 0:
            v = v / peak
        rows.append(v)
    scaled = np.stack(rows)
    strong = np.abs(scaled) >= 0.5
    unique_strong = strong & (strong.sum(axis=0, keepdims=True) == 1)
    specific = {
        int(c): [int(j) for j in np.flatnonzero(unique_strong[k])]
        for k, c in enumerate(model.classes)
    }
    return WeightReport(
        classes=model.classes.copy(),
        scaled=scaled,
        threshold=float(threshold),
        intention_specific=specific,
    )


# --- JSON serialization ---------------------------------------------------------

def model_to_dict(model) -> dict:
    if isinstance(model, OvrModel):
        return {
            "type": "ovr",
            "classes": model.classes.tolist(),
            "models": [model_to_dict(m) for m in model.models],
        }
    out = {
        "type": "binary",
        "kind": model.kind,
        "C": model.C,
        "b": model.b,
        "alpha": model.alpha.tolist(),
        "y": model.y.tolist(),
        "support": model.support.tolist(),
        "n_train": model.n_train,
    }
    if model.w is not None:
        out["w"] = model.w.tolist()
    return out


def model_from_dict(d: dict):
    if d["type"] == "ovr":
        models = [model_from_dict(m) for m in d["models"]]
        return OvrModel(
            classes=np.array(d["classes"], dtype=np.int64),
            models=models,
            kind=models[0].kind,
        )
    return SvmModel(
        kind=d["kind"],
        C=float(d["C"]),
        b=float(d["b"]),
        alpha=np.array(d["alpha"], dtype=np.float64),
        y=np.array(d["y"], dtype=np.float64),
        support=np.array(d["support"], dtype=np.int64),
        w=np.array(d["w"], dtype=np.float64) if "w" in d else None,
        n_train=int(d["n_train"]),
    )
