"""Data model, dataset ingestion, and the synthetic reach-to-grasp generator.

Trials are sequences of 20-marker positions (mm) sampled at a fixed rate.
The synthetic generator transports a canonical hand template along a
minimum-jerk path from a fixed start pose to a fixed bottle pose and plants
a per-subject constant deformation, a per-intention time-varying perturbation
in grip aperture and wrist height, and i.i.d. sensor noise.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataIoError,
    DuplicateTrialId,
    InvalidConfig,
    MissingFile,
    MissingRole,
    SchemaError,
)

N_MARKERS = 20
N_COORDS = 3 * N_MARKERS

REQUIRED_ROLES = (
    "wrist",
    "thumb_tip",
    "index_tip",
    "thumb_base",
    "index_base",
    "radius",
    "phalanx",
    "dorsum_1",
    "dorsum_2",
)

TRIAL_FLOAT_FMT = "%.5f"


class Intention(enum.IntEnum):
    """The four grasp intentions, in canonical comparison order."""

    POURING = 0
    PASSING = 1
    DRINKING = 2
    PLACING = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, text: str) -> "Intention":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise SchemaError(f"unknown intention label: {text!r}") from None


INTENTION_LABELS = tuple(i.label for i in Intention)


@dataclass(frozen=True)
class MarkerMap:
    """Role name -> marker index for the subset of markers with known identity.

    All 20 marker columns are retained in every trial; the map only names the
    ones the feature definitions need.
    """

    roles: dict[str, int]

    def __post_init__(self):
        for role in REQUIRED_ROLES:
            if role not in self.roles:
                raise MissingRole(f"marker map is missing required role {role!r}")
        indices = list(self.roles.values())
        for idx in indices:
            if not isinstance(idx, (int, np.integer)) or not 0 <= idx < N_MARKERS:
                raise SchemaError(f"marker index {idx!r} outside [0, {N_MARKERS})")
        if len(set(indices)) != len(indices):
            raise SchemaError("marker map assigns the same index to two roles")

    def index(self, role: str) -> int:
        try:
            return self.roles[role]
        except KeyError:
            raise MissingRole(f"marker map has no role {role!r}") from None

    def to_dict(self) -> dict[str, int]:
        return dict(self.roles)


DEFAULT_MARKER_MAP = MarkerMap(
    {
        "wrist": 0,
        "thumb_tip": 1,
        "index_tip": 2,
        "thumb_base": 3,
        "index_base": 4,
        "radius": 5,
        "phalanx": 6,
        "dorsum_1": 7,
        "dorsum_2": 8,
    }
)


@dataclass(frozen=True)
class Trial:
    """One reach-to-grasp execution: (T, 20, 3) marker positions in mm."""

    trial_id: str
    subject_id: int
    intention: Intention
    frames: np.ndarray
    sample_rate: float = 100.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (N_MARKERS, 3):
            raise SchemaError(
                f"trial {self.trial_id!r}: frames must be (T, {N_MARKERS}, 3), "
                f"got {frames.shape}"
            )
        if frames.shape[0] < 2:
            raise SchemaError(f"trial {self.trial_id!r}: needs at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise SchemaError(f"trial {self.trial_id!r}: non-finite coordinate")
        if not self.sample_rate > 0:
            raise SchemaError(f"trial {self.trial_id!r}: sample_rate must be > 0")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        if self.subject_id < 1:
            raise SchemaError(f"trial {self.trial_id!r}: subject_id must be >= 1")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.sample_rate

    def marker(self, index: int) -> np.ndarray:
        return self.frames[:, index, :]

    def with_frames(self, frames: np.ndarray) -> "Trial":
        return replace(self, frames=frames)


@dataclass(frozen=True)
class Dataset:
    """A validated collection of trials sharing one marker map."""

    trials: tuple[Trial, ...]
    marker_map: MarkerMap = DEFAULT_MARKER_MAP
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        if not self.trials:
            raise SchemaError("dataset has no trials")
        ids = [t.trial_id for t in self.trials]
        seen = set()
        for tid in ids:
            if tid in seen:
                raise DuplicateTrialId(f"duplicate trial id {tid!r}")
            seen.add(tid)
        subjects = sorted({t.subject_id for t in self.trials})
        if subjects != list(range(1, len(subjects) + 1)):
            raise SchemaError(
                f"subject ids must form a contiguous set 1..S, got {subjects}"
            )
        cells = {(t.subject_id, t.intention) for t in self.trials}
        for s in subjects:
            for i in Intention:
                if (s, i) not in cells:
                    raise SchemaError(
                        f"subject {s} has no trial for intention {i.label}"
                    )

    @property
    def n_subjects(self) -> int:
        return max(t.subject_id for t in self.trials)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([t.subject_id for t in self.trials], dtype=np.int64)

    @property
    def intention_codes(self) -> np.ndarray:
        return np.array([int(t.intention) for t in self.trials], dtype=np.int64)

    @property
    def trial_ids(self) -> tuple[str, ...]:
        return tuple(t.trial_id for t in self.trials)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic generator.

    The default scales encode the empirical structure of real grasp data:
    inter-subject variation dominates, intention leaves a smaller time-varying
    trace, and sensor noise is smaller still.
    """

    n_subjects: int = 8
    trials_per_cell: int = 20
    duration_range: tuple[float, float] = (1.4, 2.6)
    noise_std: float = 0.5
    subject_effect: float = 8.0
    intention_effect: float = 3.0
    sample_rate: float = 100.0
    seed: int = 0

    n_intentions = len(Intention)  # fixed by the task

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_cell < 1:
            raise InvalidConfig("need at least one subject and one trial per cell")
        lo, hi = self.duration_range
        if not (0 < lo <= hi):
            raise InvalidConfig(f"bad duration range {self.duration_range}")
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be > 0")
        for name in ("noise_std", "subject_effect", "intention_effect"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        # The documented regime is subject > intention > noise > 0.  Zeroed
        # scales are allowed for diagnostic runs; the ordering is only
        # enforced between strictly positive values.
        scales = [self.subject_effect, self.intention_effect, self.noise_std]
        positive = [s for s in scales if s > 0]
        if positive != sorted(positive, reverse=True) or len(set(positive)) != len(positive):
            raise InvalidConfig(
                "effect scales must satisfy subject_effect > intention_effect "
                f"> noise_std among nonzero values, got {scales}"
            )

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "trials_per_cell": self.trials_per_cell,
            "duration_range": list(self.duration_range),
            "noise_std": self.noise_std,
            "subject_effect": self.subject_effect,
            "intention_effect": self.intention_effect,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        return cls(**d)


# Canonical right-hand template (mm), wrist at the origin.  Indices follow
# DEFAULT_MARKER_MAP; markers 9..19 fill out the dorsum and fingers.
HAND_TEMPLATE = np.array(
    [
        [0.0, 0.0, 0.0],      # 0 wrist
        [95.0, 55.0, -5.0],   # 1 thumb_tip
        [130.0, 25.0, 0.0],   # 2 index_tip
        [45.0, 40.0, -5.0],   # 3 thumb_base
        [85.0, 25.0, 5.0],    # 4 index_base
        [-5.0, 25.0, 0.0],    # 5 radius
        [95.0, 0.0, 5.0],     # 6 phalanx
        [60.0, 10.0, 5.0],    # 7 dorsum_1
        [55.0, -25.0, 8.0],   # 8 dorsum_2
        [30.0, 5.0, 3.0],
        [40.0, -10.0, 6.0],
        [70.0, 30.0, 2.0],
        [75.0, -15.0, 6.0],
        [110.0, 10.0, 2.0],
        [120.0, 40.0, -2.0],
        [25.0, -20.0, 4.0],
        [15.0, 30.0, -2.0],
        [90.0, 45.0, -4.0],
        [105.0, -8.0, 4.0],
        [50.0, 55.0, -6.0],
    ]
)

START_POSE = np.array([0.0, 0.0, 50.0])
BOTTLE_POSE = np.array([460.0, 0.0, 80.0])
REST_SECONDS = 0.15
YAW_RANGE = 0.35  # rad of whole-hand rotation over the reach

# Per-intention perturbation profiles on the grip-aperture and wrist-height
# channels.  Each channel gets a Gaussian bump (amplitude, centre, width) plus
# a slow ramp that fades in over the second half of the reach; everything
# sits past ~40% of the reach so that short snippets carry little of the
# intention signal, mirroring how grasp shaping happens near contact.
INTENTION_PROFILES = {
    Intention.POURING: ((1.0, 0.55, 0.10), (-0.8, 0.80, 0.10), (0.7, -0.4)),
    Intention.PASSING: ((1.0, 0.80, 0.08), (0.8, 0.60, 0.10), (-0.6, 0.5)),
    Intention.DRINKING: ((-1.0, 0.65, 0.10), (0.6, 0.85, 0.08), (0.25, 0.7)),
    Intention.PLACING: ((0.5, 0.88, 0.06), (-0.8, 0.55, 0.10), (-0.3, -0.7)),
}
RAMP_ONSET = 0.35

# Subject-specific modulation of the intention profiles: each (subject,
# intention) pair expresses the shared profile with its own amplitude and
# timing, and additionally carries an idiosyncratic bump whose sign and
# centre are private to that pair.  Pooled linear models cannot exploit the
# idiosyncratic part; per-subject models can, so subject identity genuinely
# helps prediction.
SUBJECT_AMPLITUDE_JITTER = 0.25
SUBJECT_TIMING_JITTER = 0.05
IDIO_SCALE = 1.0
IDIO_WIDTH = 0.08
IDIO_CENTER_RANGE = (0.45, 0.95)


def minimum_jerk_profile(tau: np.ndarray) -> np.ndarray:
    """Normalized minimum-jerk position profile on tau in [0, 1]."""
    return 10.0 * tau**3 - 15.0 * tau**4 + 6.0 * tau**5


def _bump(tau: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((tau - center) / width) ** 2)


def _ramp(tau: np.ndarray, onset: float = RAMP_ONSET) -> np.ndarray:
    u = np.clip((tau - onset) / (1.0 - onset), 0.0, 1.0)
    return 3.0 * u**2 - 2.0 * u**3


def _synth_trial_frames(
    template: np.ndarray,
    duration: float,
    sample_rate: float,
    aperture: tuple[float, float, float],
    height: tuple[float, float, float],
    ramps: tuple[float, float],
    idio,
    intention_effect: float,
    noise_std: float,
    rng: np.random.Generator,
    thumb_idx: int,
    index_idx: int,
) -> np.ndarray:
    n_move = int(round(duration * sample_rate)) + 1
    n_rest = int(round(REST_SECONDS * sample_rate))
    tau = np.concatenate(
        [np.zeros(n_rest), np.linspace(0.0, 1.0, n_move), np.ones(n_rest)]
    )
    n_frames = tau.size

    p = minimum_jerk_profile(tau)
    path = START_POSE + np.outer(p, BOTTLE_POSE - START_POSE)
    yaw = YAW_RANGE * p

    a_amp, a_c, a_w = aperture
    h_amp, h_c, h_w = height
    a_ramp, h_ramp = ramps
    (ia_amp, ia_c), (ih_amp, ih_c) = idio
    ramp = _ramp(tau)
    ap_delta = intention_effect * (
        a_amp * _bump(tau, a_c, a_w)
        + a_ramp * ramp
        + ia_amp * _bump(tau, ia_c, IDIO_WIDTH)
    )
    hz_delta = intention_effect * (
        h_amp * _bump(tau, h_c, h_w)
        + h_ramp * ramp
        + ih_amp * _bump(tau, ih_c, IDIO_WIDTH)
    )

    local = np.broadcast_to(template, (n_frames, N_MARKERS, 3)).copy()
    axis = template[thumb_idx] - template[index_idx]
    axis = axis / np.linalg.norm(axis)
    local[:, thumb_idx, :] += 0.5 * ap_delta[:, None] * axis
    local[:, index_idx, :] -= 0.5 * ap_delta[:, None] * axis

    cos, sin = np.cos(yaw), np.sin(yaw)
    rot = np.zeros((n_frames, 3, 3))
    rot[:, 0, 0] = cos
    rot[:, 0, 1] = -sin
    rot[:, 1, 0] = sin
    rot[:, 1, 1] = cos
    rot[:, 2, 2] = 1.0

    world = np.einsum("tij,tmj->tmi", rot, local)
    world += path[:, None, :]
    world[:, :, 2] += hz_delta[:, None]
    if noise_std > 0:
        world = world + rng.normal(0.0, noise_std, world.shape)
    return world


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Generate a synthetic dataset; a pure function of ``config``.

    Draw order is fixed (subject fields, per-cell modulations, then trials in
    subject/intention/repeat order), so equal configs give byte-identical
    datasets.
    """
    rng = np.random.default_rng(config.seed)
    n_sub = config.n_subjects

    subject_fields = rng.normal(
        0.0, config.subject_effect, (n_sub, N_MARKERS, 3)
    ) if config.subject_effect > 0 else np.zeros((n_sub, N_MARKERS, 3))

    amp_jitter = 1.0 + SUBJECT_AMPLITUDE_JITTER * rng.standard_normal((n_sub, len(Intention), 2))
    ramp_jitter = 1.0 + SUBJECT_AMPLITUDE_JITTER * rng.standard_normal((n_sub, len(Intention), 2))
    timing_jitter = SUBJECT_TIMING_JITTER * rng.standard_normal((n_sub, len(Intention), 2))
    idio_signs = rng.choice([-1.0, 1.0], size=(n_sub, len(Intention), 2))
    idio_centers = rng.uniform(*IDIO_CENTER_RANGE, size=(n_sub, len(Intention), 2))

    thumb_idx = DEFAULT_MARKER_MAP.index("thumb_tip")
    index_idx = DEFAULT_MARKER_MAP.index("index_tip")
    lo, hi = config.duration_range

    trials = []
    for s in range(1, n_sub + 1):
        template = HAND_TEMPLATE + subject_fields[s - 1]
        for intention in Intention:
            (a_amp, a_c, a_w), (h_amp, h_c, h_w), (a_r, h_r) = INTENTION_PROFILES[intention]
            ja, jh = amp_jitter[s - 1, int(intention)]
            ra, rh = ramp_jitter[s - 1, int(intention)]
            da, dh = timing_jitter[s - 1, int(intention)]
            aperture = (a_amp * ja, a_c + da, a_w)
            height = (h_amp * jh, h_c + dh, h_w)
            ramps = (a_r * ra, h_r * rh)
            idio = (
                (IDIO_SCALE * idio_signs[s - 1, int(intention), 0],
                 idio_centers[s - 1, int(intention), 0]),
                (IDIO_SCALE * idio_signs[s - 1, int(intention), 1],
                 idio_centers[s - 1, int(intention), 1]),
            )
            for k in range(config.trials_per_cell):
                duration = rng.uniform(lo, hi)
                frames = _synth_trial_frames(
                    template,
                    duration,
                    config.sample_rate,
                    aperture,
                    height,
                    ramps,
                    idio,
                    config.intention_effect,
                    config.noise_std,
                    rng,
                    thumb_idx,
                    index_idx,
                )
                trials.append(
                    Trial(
                        trial_id=f"S{s:02d}_{intention.label}_{k:02d}",
                        subject_id=s,
                        intention=intention,
                        frames=frames,
                        sample_rate=config.sample_rate,
                    )
                )
    return Dataset(
        trials=tuple(trials),
        marker_map=DEFAULT_MARKER_MAP,
        metadata={"name": "synthetic", "seed": config.seed, "config": config.to_dict()},
    )


# --- trial CSV / manifest I/O ---------------------------------------------------

def _trial_header() -> str:
    cols = ["t"]
    for m in range(N_MARKERS):
        cols += [f"m{m:02d}_{ax}" for ax in ("x", "y", "z")]
    return ",".join(cols)


def _read_trial_csv(path: Path) -> tuple[np.ndarray, float]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != _trial_header():
            raise SchemaError(f"{path}: unexpected header")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 1 + N_COORDS:
        raise SchemaError(
            f"{path}: expected {1 + N_COORDS} columns, got {data.shape[1]}"
        )
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise SchemaError(f"{path}: non-finite value at data row {row}")
    t = data[:, 0]
    if t.size < 2:
        raise SchemaError(f"{path}: need at least 2 rows")
    if not np.all(np.diff(t) > 0):
        raise SchemaError(f"{path}: time column must be strictly increasing")
    sample_rate = (t.size - 1) / (t[-1] - t[0])
    frames = data[:, 1:].reshape(-1, N_MARKERS, 3)
    return frames, sample_rate


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset from a manifest JSON plus per-trial CSV files."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("name", "marker_map", "trials"):
        if key not in manifest:
            raise SchemaError(f"{manifest_path}: manifest missing key {key!r}")
    marker_map = MarkerMap({str(k): int(v) for k, v in manifest["marker_map"].items()})
    trials = []
    for entry in manifest["trials"]:
        for key in ("file", "trial_id", "subject", "intention"):
            if key not in entry:
                raise SchemaError(f"trial entry missing key {key!r}: {entry}")
        csv_path = manifest_path.parent / entry["file"]
        if not csv_path.exists():
            raise MissingFile(f"trial file not found: {csv_path}")
        frames, sample_rate = _read_trial_csv(csv_path)
        trials.append(
            Trial(
                trial_id=str(entry["trial_id"]),
                subject_id=int(entry["subject"]),
                intention=Intention.from_label(entry["intention"]),
                frames=frames,
                sample_rate=sample_rate,
            )
        )
    return Dataset(
        trials=tuple(trials),
        marker_map=marker_map,
        metadata={"name": manifest["name"], "manifest": str(manifest_path)},
    )


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a dataset as manifest JSON + one CSV per trial; returns manifest path."""
    out_dir = Path(out_dir)
    trials_dir = out_dir / "trials"
    try:
        trials_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for trial in dataset.trials:
            rel = f"trials/{trial.trial_id}.csv"
            t = np.arange(trial.n_frames) / trial.sample_rate
            table = np.column_stack([t, trial.frames.reshape(trial.n_frames, -1)])
            np.savetxt(
                out_dir / rel,
                table,
                delimiter=",",
                fmt=TRIAL_FLOAT_FMT,
                header=_trial_header(),
                comments="",
            )
            entries.append(
                {
                    "file": rel,
                    "trial_id": trial.trial_id,
                    "subject": trial.subject_id,
                    "intention": trial.intention.label,
                }
            )
        manifest = {
            "name": dataset.metadata.get("name", "dataset"),
            "marker_map": dataset.marker_map.to_dict(),
            "trials": entries,
        }
        manifest_path = out_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise DataIoError(str(exc)) from exc
    return manifest_path


def export_feature_matrix(dataset: Dataset, features: np.ndarray, path: str | Path) -> None:
    """Write one labelled CSV row per trial; feeds external embedding tools."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(len(dataset.trials), -1)
    if features.shape[0] != len(dataset.trials):
        raise SchemaError(
            f"feature rows ({features.shape[0]}) != trial count ({len(dataset.trials)})"
        )
    n, d = features.shape
    header = ["trial_id", "subject_id", "intention"] + [f"f{j:04d}" for j in range(d)]
    try:
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for trial, row in zip(dataset.trials, features):
                cells = [trial.trial_id, str(trial.subject_id), trial.intention.label]
                cells += [repr(float(v)) for v in row]
                fh.write(",".join(cells) + "\n")
    except OSError as exc:
        raise DataIoError(str(exc)) from exc


def load_feature_matrix(path: str | Path):
    """Inverse of export_feature_matrix; returns (ids, subjects, intentions, matrix)."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            ids, subjects, intentions, rows = [], [], [], []
            for line in fh:
                cells = line.rstrip("\n").split(",")
                ids.append(cells[0])
                subjects.append(int(cells[1]))
                intentions.append(Intention.from_label(cells[2]))
                rows.append([float(v) for v in cells[3:]])
    except OSError as exc:
        raise DataIoError(str(exc)) from exc
    d = len(header) - 3
    matrix = np.array(rows, dtype=np.float64).reshape(len(ids), d)
    return ids, np.array(subjects), intentions, matrix
