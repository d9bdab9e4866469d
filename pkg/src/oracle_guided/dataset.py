"""Balanced modal dataset of oracle trajectories for the mode encoder."""

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import IoFailure
from .lti import GRAV, N_STATE, PX, PZ, VX
from .oracle import OracleQuery, heading_speed
from .terrain import PARKOUR_MODES, ModeParamRanges, ModeSpec, TerrainWindow, sample_mode_params

STATE_COLUMNS = ("p_x", "p_z", "theta", "v_x", "v_z", "omega")
DATASET_COLUMNS = ("traj_id", "mode_label", "step") + STATE_COLUMNS
WINDOW_SPAN = 4.0
START_X = 0.5


def default_initial_states(nominal_height=0.55, speeds=(0.0, 0.3, 0.55, 0.8)):
    """Upright states at nominal height with a few heading speeds."""
    out = []
    for v in speeds:
        x = np.zeros(N_STATE)
        x[PZ], x[VX], x[GRAV] = nominal_height, v, 1.0
        out.append(x)
    return np.array(out)


@dataclass(frozen=True)
class Dataset:
    states: np.ndarray  # (n, H+1, 7)
    labels: tuple
    specs: tuple
    horizon: int
    seed: int
    ranges: ModeParamRanges
    oracle_kind: str

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.labels)

    def counts(self):
        return {m: self.labels.count(m) for m in sorted(set(self.labels))}

    def split(self, holdout=0.2, seed=0):
        """(train, test) index arrays, stratified per mode."""
        rng = np.random.default_rng(seed)
        labels = np.asarray(self.labels)
        train, test = [], []
        for m in sorted(set(self.labels)):
            idx = rng.permutation(np.flatnonzero(labels == m))
            n_test = int(round(holdout * len(idx)))
            test.extend(idx[:n_test])
            train.extend(idx[n_test:])
        return np.sort(train), np.sort(test)

    def manifest(self):
        return {
            "seed": self.seed,
            "horizon": self.horizon,
            "oracle": self.oracle_kind,
            "counts": self.counts(),
            "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.ranges).items()},
        }


def _mode_window(spec, cfg, takeoff_step):
    """Terrain window holding the obstacle ``spec`` describes, placed so the
    planned takeoff falls on ``takeoff_step``. Aligning the windows keeps
    obstacle timing out of the latent."""
    n = int(round(WINDOW_SPAN / 0.01)) + 1
    xs = np.arange(n) * 0.01
    heights = np.zeros(n)
    gaps = np.zeros(n, bool)
    if spec.mode == "pace":
        return TerrainWindow(0.0, 0.01, heights, gaps)
    v = heading_speed(spec, cfg)
    if spec.mode == "jump":
        t_up = math.sqrt(2.0 * (spec.h + cfg.margin) / cfg.gravity)
        start = START_X + v * (takeoff_step * cfg.dt + t_up)
    else:
        start = START_X + v * takeoff_step * cfg.dt + cfg.margin
    inside = (xs >= start) & (xs < start + spec.w)
    if spec.mode == "jump":
        heights[inside] = spec.h
    else:
        heights[inside] = -spec.d
        gaps[inside] = True
    return TerrainWindow(0.0, 0.01, heights, gaps)


def generate_mode_dataset(oracle, ranges=None, initial_states=None, n_per_mode=100,
                          horizon=30, seed=0, modes=PARKOUR_MODES, takeoff_step=8):
    """``n_per_mode`` oracle trajectories per mode with uniformly drawn
    parameters; every trajectory has ``horizon + 1`` states."""
    if n_per_mode < 1:
        raise ValueError("n_per_mode must be >= 1")
    ranges = ModeParamRanges() if ranges is None else ranges
    inits = default_initial_states() if initial_states is None else np.asarray(initial_states, float)
    if inits.ndim != 2 or inits.shape[1] != N_STATE or len(inits) == 0:
        raise ValueError(f"initial_states must be a non-empty (n, {N_STATE}) array")
    rng = np.random.default_rng(seed)
    states, labels, specs = [], [], []
    for mode in modes:
        for _ in range(n_per_mode):
            spec = sample_mode_params(rng, ranges, mode)
            x = inits[rng.integers(len(inits))].copy()
            x[PX] = START_X
            win = _mode_window(spec, oracle.plan_cfg_, takeoff_step)
            ref = oracle.predict(OracleQuery(x, spec, win, horizon))
            states.append(ref.states)
            labels.append(mode)
            specs.append(spec)
    return Dataset(np.array(states), tuple(labels), tuple(specs), horizon, seed, ranges, oracle.kind)


def dataset_csv(dataset):
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_COLUMNS)
    for i, (label, traj) in enumerate(zip(dataset.labels, dataset.states)):
        for k, row in enumerate(traj):
            w.writerow([i, label, k, *(repr(float(v)) for v in row[: len(STATE_COLUMNS)])])
    return buf.getvalue()


def write_dataset(dataset, path):
    """Write the CSV at ``path`` and its manifest next to it; returns the manifest."""
    path = Path(path)
    text = dataset_csv(dataset)
    manifest = dataset.manifest()
    manifest["sha256"] = hashlib.sha256(text.encode()).hexdigest()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc
    return manifest


def read_dataset(path):
    """Inverse of ``write_dataset`` (specs are not stored, only labels)."""
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".manifest.json").read_text())
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    by_traj = {}
    labels = {}
    for row in rows:
        i = int(row["traj_id"])
        labels[i] = row["mode_label"]
        by_traj.setdefault(i, []).append([float(row[c]) for c in STATE_COLUMNS] + [1.0])
    ids = sorted(by_traj)
    ranges = ModeParamRanges(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in manifest["ranges"].items()})
    return Dataset(np.array([by_traj[i] for i in ids]), tuple(labels[i] for i in ids),
                   tuple(ModeSpec(labels[i]) for i in ids), manifest["horizon"],
                   manifest["seed"], ranges, manifest["oracle"])


def latent_csv(z, labels):
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("z1", "z2", "mode_label"))
    for (z1, z2), label in zip(np.asarray(z, float), labels):
        w.writerow((repr(float(z1)), repr(float(z2)), label))
    return buf.getvalue()
