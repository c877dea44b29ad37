"""Signal conditioning and the 16 kinematic feature channels.

A trial is conditioned by zero-phase low-pass filtering of every marker
coordinate followed by wrist-speed segmentation.  Features come in two
groups: four world-frame channels (wrist velocity / height / horizontal
trajectory, grip aperture) and twelve hand-frame channels (thumb, index,
thumb-index plane normal and radius->phalanx vector coordinates).  Every
channel is resampled to 100 samples on normalized trial time; the full
descriptor concatenates the local block (1200) before the global one (400).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

from .data import MarkerMap, Trial
from .errors import (
    DegenerateFrame,
    InvalidCutoff,
    InvalidFraction,
    NoMotion,
    TooShort,
)

GLOBAL_CHANNELS = ("wrist_velocity", "wrist_height", "wrist_horizontal", "grip_aperture")
LOCAL_CHANNELS = tuple(
    f"{part}_{ax}"
    for part in ("thumb", "index", "thumb_index_plane", "radius_phalanx")
    for ax in ("x", "y", "z")
)
# Canonical order: local block first, then global, matching the layout of the
# concatenated descriptor.
CHANNEL_ORDER = LOCAL_CHANNELS + GLOBAL_CHANNELS

N_SAMPLES = 100
SNIPPET_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)

_COLLINEAR_TOL = 1e-8
_FILTER_ORDER = 2
_MIN_FILTER_LEN = 7


@dataclass(frozen=True)
class SegmentationParams:
    """Wrist-speed threshold (mm/s) and filter cutoff (Hz)."""

    epsilon: float = 20.0
    cutoff_hz: float = 6.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidCutoff("epsilon must be > 0")
        if self.cutoff_hz <= 0:
            raise InvalidCutoff("cutoff must be > 0")


@dataclass(frozen=True)
class KinematicSeries:
    """The 16 named channels, each resampled to the same length."""

    channels: dict[str, np.ndarray]

    def __post_init__(self):
        if tuple(self.channels.keys()) != CHANNEL_ORDER:
            raise ValueError("channels must appear in canonical order")
        lengths = {v.shape for v in self.channels.values()}
        if len(lengths) != 1:
            raise ValueError(f"channel lengths differ: {lengths}")
        for name, v in self.channels.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"channel {name} contains non-finite values")

    def matrix(self) -> np.ndarray:
        """(16, n) array in canonical channel order."""
        return np.stack([self.channels[name] for name in CHANNEL_ORDER])

    def vector(self, which: str = "both") -> np.ndarray:
        if which == "global":
            names = GLOBAL_CHANNELS
        elif which == "local":
            names = LOCAL_CHANNELS
        elif which == "both":
            names = CHANNEL_ORDER
        else:
            raise ValueError(f"unknown feature set {which!r}")
        return np.concatenate([self.channels[n] for n in names])


def _zero_phase(x: np.ndarray, cutoff: float, sample_rate: float) -> np.ndarray:
    """Forward-backward 2nd-order Butterworth along axis 0."""
    n = x.shape[0]
    if n < _MIN_FILTER_LEN:
        raise TooShort(f"need at least {_MIN_FILTER_LEN} samples, got {n}")
    nyquist = sample_rate / 2.0
    if not 0 < cutoff < nyquist:
        raise InvalidCutoff(f"cutoff {cutoff} Hz outside (0, {nyquist}) Hz")
    b, a = butter(_FILTER_ORDER, cutoff / nyquist)
    padlen = min(3 * max(len(a), len(b)), n - 1)
    return filtfilt(b, a, x, axis=0, padlen=padlen)


def butterworth_lowpass(signal, cutoff: float, sample_rate: float) -> np.ndarray:
    """Zero-phase low-pass of a 1-d signal; length preserved, DC gain 1."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("butterworth_lowpass expects a 1-d signal")
    return _zero_phase(x, cutoff, sample_rate)


def filter_trial(trial: Trial, cutoff: float = 6.0) -> Trial:
    """Filter every marker coordinate of a trial."""
    flat = trial.frames.reshape(trial.n_frames, -1)
    filtered = _zero_phase(flat, cutoff, trial.sample_rate)
    return trial.with_frames(filtered.reshape(trial.frames.shape))


def _speed(positions: np.ndarray, sample_rate: float) -> np.ndarray:
    """Speed magnitude via central differences (one-sided at the ends)."""
    vel = np.gradient(positions, 1.0 / sample_rate, axis=0, edge_order=1)
    return np.linalg.norm(vel, axis=1)


def segment_trial(
    trial: Trial,
    params: SegmentationParams = SegmentationParams(),
    marker_map: MarkerMap | None = None,
) -> Trial:
    """Trim a trial to [t0, tf]: first wrist-speed crossing above epsilon up to
    the first later drop below it (sequence end if it never drops).

    The threshold decision always runs on filtered wrist positions, so the
    operation is well defined on raw input too.  Without a marker map the
    wrist is taken from the conventional slot 0.
    """
    wrist_idx = marker_map.index("wrist") if marker_map is not None else 0
    wrist = trial.frames[:, wrist_idx, :]
    filtered = _zero_phase(wrist, params.cutoff_hz, trial.sample_rate)
    speed = _speed(filtered, trial.sample_rate)
    above = speed > params.epsilon
    if not above.any():
        raise NoMotion(
            f"trial {trial.trial_id!r}: wrist speed never exceeds {params.epsilon} mm/s"
        )
    t0 = int(np.argmax(above))
    later_below = np.nonzero(speed[t0 + 1 :] < params.epsilon)[0]
    tf = t0 + 1 + int(later_below[0]) if later_below.size else trial.n_frames - 1
    if tf - t0 + 1 < 2:
        raise NoMotion(f"trial {trial.trial_id!r}: active segment shorter than 2 frames")
    return trial.with_frames(trial.frames[t0 : tf + 1])


def condition_trial(
    trial: Trial,
    params: SegmentationParams = SegmentationParams(),
    marker_map: MarkerMap | None = None,
) -> Trial:
    """Filter all coordinates, then segment on the wrist channel."""
    return segment_trial(filter_trial(trial, params.cutoff_hz), params, marker_map)


def resample_unit_time(signal, n: int = N_SAMPLES) -> np.ndarray:
    """Linear interpolation at n equispaced points of normalized time."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size < 2:
        raise TooShort("resampling needs at least 2 samples")
    src = np.linspace(0.0, 1.0, x.size)
    dst = np.linspace(0.0, 1.0, n)
    return np.interp(dst, src, x)


def _global_raw(trial: Trial, marker_map: MarkerMap) -> dict[str, np.ndarray]:
    wrist = trial.frames[:, marker_map.index("wrist"), :]
    thumb = trial.frames[:, marker_map.index("thumb_tip"), :]
    index = trial.frames[:, marker_map.index("index_tip"), :]
    return {
        "wrist_velocity": _speed(wrist, trial.sample_rate),
        "wrist_height": wrist[:, 2].copy(),
        "wrist_horizontal": wrist[:, 0].copy(),
        "grip_aperture": np.linalg.norm(thumb - index, axis=1),
    }


def _hand_frames(trial: Trial, marker_map: MarkerMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame rotation matrices (rows = axes) and origins of the hand frame."""
    wrist = trial.frames[:, marker_map.index("wrist"), :]
    d1 = trial.frames[:, marker_map.index("dorsum_1"), :]
    d2 = trial.frames[:, marker_map.index("dorsum_2"), :]
    a = d1 - wrist
    b = d2 - wrist
    na = np.linalg.norm(a, axis=1)
    z = np.cross(a, b)
    nz = np.linalg.norm(z, axis=1)
    if np.any(na < _COLLINEAR_TOL) or np.any(nz < _COLLINEAR_TOL * np.maximum(na, 1.0) * np.maximum(np.linalg.norm(b, axis=1), 1.0)):
        raise DegenerateFrame(
            f"trial {trial.trial_id!r}: wrist/dorsum markers collinear in some frame"
        )
    x_axis = a / na[:, None]
    z_axis = z / nz[:, None]
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis], axis=1)  # (T, 3, 3)
    return rot, wrist


def _local_raw(trial: Trial, marker_map: MarkerMap) -> dict[str, np.ndarray]:
    rot, origin = _hand_frames(trial, marker_map)
    thumb = trial.frames[:, marker_map.index("thumb_tip"), :]
    index = trial.frames[:, marker_map.index("index_tip"), :]
    radius = trial.frames[:, marker_map.index("radius"), :]
    phalanx = trial.frames[:, marker_map.index("phalanx"), :]

    normal = np.cross(thumb - origin, index - origin)
    n_norm = np.linalg.norm(normal, axis=1)
    if np.any(n_norm < _COLLINEAR_TOL):
        raise DegenerateFrame(
            f"trial {trial.trial_id!r}: wrist/thumb/index collinear in some frame"
        )
    normal = normal / n_norm[:, None]

    local_thumb = np.einsum("tij,tj->ti", rot, thumb - origin)
    local_index = np.einsum("tij,tj->ti", rot, index - origin)
    local_normal = np.einsum("tij,tj->ti", rot, normal)
    local_rp = np.einsum("tij,tj->ti", rot, phalanx - radius)

    out = {}
    for part, arr in (
        ("thumb", local_thumb),
        ("index", local_index),
        ("thumb_index_plane", local_normal),
        ("radius_phalanx", local_rp),
    ):
        for k, ax in enumerate(("x", "y", "z")):
            out[f"{part}_{ax}"] = arr[:, k]
    return out


def compute_global_features(
    trial: Trial, marker_map: MarkerMap, n: int = N_SAMPLES
) -> dict[str, np.ndarray]:
    """The 4 world-frame channels of a conditioned trial, resampled to n."""
    raw = _global_raw(trial, marker_map)
    return {name: resample_unit_time(raw[name], n) for name in GLOBAL_CHANNELS}


def compute_local_features(
    trial: Trial, marker_map: MarkerMap, n: int = N_SAMPLES
) -> dict[str, np.ndarray]:
    """The 12 hand-frame channels of a conditioned trial, resampled to n."""
    raw = _local_raw(trial, marker_map)
    return {name: resample_unit_time(raw[name], n) for name in LOCAL_CHANNELS}


def compute_series(trial: Trial, marker_map: MarkerMap, n: int = N_SAMPLES) -> KinematicSeries:
    local = compute_local_features(trial, marker_map, n)
    global_ = compute_global_features(trial, marker_map, n)
    channels = {name: local[name] for name in LOCAL_CHANNELS}
    channels.update({name: global_[name] for name in GLOBAL_CHANNELS})
    return KinematicSeries(channels)


def native_channel_matrix(trial: Trial, marker_map: MarkerMap) -> np.ndarray:
    """(16, T) channel matrix at the trial's native length (no resampling)."""
    local = _local_raw(trial, marker_map)
    global_ = _global_raw(trial, marker_map)
    rows = [local[name] for name in LOCAL_CHANNELS]
    rows += [global_[name] for name in GLOBAL_CHANNELS]
    return np.stack(rows)


def feature_vector(trial: Trial, marker_map: MarkerMap, which: str = "both") -> np.ndarray:
    """Concatenated descriptor: local (1200), global (400) or both (1600)."""
    return compute_series(trial, marker_map).vector(which)


def truncate_snippet(trial: Trial, fraction: float) -> Trial:
    """Keep the first max(2, ceil(fraction * T)) frames of a segmented trial."""
    if not any(math.isclose(fraction, f, rel_tol=0, abs_tol=1e-9) for f in SNIPPET_FRACTIONS):
        raise InvalidFraction(
            f"fraction must be one of {SNIPPET_FRACTIONS}, got {fraction}"
        )
    if math.isclose(fraction, 1.0, abs_tol=1e-9):
        return trial
    keep = max(2, int(math.ceil(fraction * trial.n_frames - 1e-9)))
    return trial.with_frames(trial.frames[:keep])
