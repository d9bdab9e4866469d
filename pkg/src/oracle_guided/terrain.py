"""Procedural parkour tracks, task-vital modes and their parameter boxes."""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .exceptions import InfeasibleLayout, OutOfRange

MODES = ("pace", "jump", "leap", "flip", "settle")
PARKOUR_MODES = ("pace", "jump", "leap")
MODE_PARAMS = {
    "pace": ("v",),
    "jump": ("w", "h"),
    "leap": ("w", "d"),
    "flip": ("r", "h"),
    "settle": (),
}


@dataclass(frozen=True)
class Segment:
    kind: str
    start_x: float
    w: float
    h: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.kind not in ("flat", "block", "gap"):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if not self.w > 0:
            raise ValueError("segment width must be positive")
        if self.kind == "block" and not self.h > 0:
            raise ValueError("block height must be positive")
        if self.kind == "gap" and not self.d > 0:
            raise ValueError("gap depth must be positive")

    @property
    def end_x(self):
        return self.start_x + self.w

    @property
    def is_obstacle(self):
        return self.kind != "flat"


@dataclass(frozen=True)
class Track:
    segments: tuple
    length: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        x = 0.0
        for seg in self.segments:
            if abs(seg.start_x - x) > 1e-9:
                raise ValueError("segments must be contiguous, sorted and non-overlapping")
            x = seg.end_x
        if abs(x - self.length) > 1e-9:
            raise ValueError("segments must cover [0, length]")

    @property
    def obstacles(self):
        return [s for s in self.segments if s.is_obstacle]

    def heightfield(self, resolution=0.01, pad=0.0):
        """Sampled (x, heights, gap_mask) on [0, length + pad].

        Beyond the track end the last segment's height is held.
        """
        n = int(round((self.length + pad) / resolution)) + 1
        xs = np.arange(n) * resolution
        heights = np.zeros(n)
        gaps = np.zeros(n, dtype=bool)
        for seg in self.segments:
            if seg.kind == "flat":
                continue
            sel = (xs >= seg.start_x) & (xs < seg.end_x)
            if seg.kind == "block":
                heights[sel] = seg.h
            else:
                heights[sel] = -seg.d
                gaps[sel] = True
        last = self.segments[-1]
        tail = xs >= self.length
        heights[tail] = last.h if last.kind == "block" else (-last.d if last.kind == "gap" else 0.0)
        gaps[tail] = last.kind == "gap"
        return xs, heights, gaps


@dataclass(frozen=True)
class ModeSpec:
    """Active mode with its continuous parameters.

    ``v`` is the commanded heading speed; it is the only parameter of
    ``pace`` and is carried along by the other parkour modes so the oracle
    knows how fast to advance.
    """

    mode: str
    v: float = 0.0
    w: float = 0.0
    h: float = 0.0
    d: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def params(self):
        return {name: getattr(self, name) for name in MODE_PARAMS[self.mode]}

    def as_vector(self):
        return np.array([self.v, self.w, self.h, self.d, self.r])


def _interval(value):
    lo, hi = (float(v) for v in value)
    if hi < lo:
        raise ValueError(f"interval [{lo}, {hi}] is empty")
    return (lo, hi)


@dataclass(frozen=True)
class ModeParamRanges:
    """Training box of mode parameters and its dilated test box."""

    pace_v: tuple = (0.3, 0.8)
    jump_w: tuple = (0.1, 0.3)
    jump_h: tuple = (0.0275, 0.11)
    leap_w: tuple = (0.15, 0.462)
    leap_d: tuple = (0.3, 0.8)
    flip_r: tuple = (math.pi, 2 * math.pi)
    flip_h: tuple = (0.5, 2.0)
    dilation: float = 1.5

    def __post_init__(self):
        for name in self.fields():
            object.__setattr__(self, name, _interval(getattr(self, name)))
        if self.dilation < 1.0:
            raise ValueError("dilation must be >= 1 so the test box contains the training box")

    @staticmethod
    def fields():
        return ("pace_v", "jump_w", "jump_h", "leap_w", "leap_d", "flip_r", "flip_h")

    def interval(self, mode, param):
        if mode == "pace" and param == "v":
            return self.pace_v
        return getattr(self, f"{mode}_{param}")

    def test_box(self):
        """Dilated box [lo / f, hi * f] per parameter."""
        f = self.dilation
        return replace(
            self,
            **{name: (getattr(self, name)[0] / f, getattr(self, name)[1] * f) for name in self.fields()},
            dilation=1.0,
        )

    def contains(self, spec):
        for name, value in spec.params.items():
            lo, hi = self.interval(spec.mode, name)
            if not lo - 1e-12 <= value <= hi + 1e-12:
                return False
        return True

    def to_dict(self):
        return {name: list(getattr(self, name)) for name in self.fields()} | {"dilation": self.dilation}


def generate_track(seed, ranges=None, length=10.0, obstacle_density=0.3, *,
                   min_flat=1.0, start_flat=1.0, kinds=("block", "gap")):
    """Random track: flats of at least ``min_flat`` separate the obstacles.

    The obstacle count is ``round(density * length)``; obstacle kind is drawn
    uniformly from ``kinds`` and dimensions uniformly from the training box.
    """
    ranges = ModeParamRanges() if ranges is None else ranges
    if not length > 0:
        raise ValueError("length must be positive")
    if obstacle_density < 0:
        raise ValueError("obstacle_density must be non-negative")
    rng = np.random.default_rng(seed)
    n = int(round(obstacle_density * length))
    if n == 0:
        return Track((Segment("flat", 0.0, length),), length, seed)

    obstacles = []
    for _ in range(n):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "block":
            w = rng.uniform(*ranges.jump_w)
            obstacles.append(("block", w, rng.uniform(*ranges.jump_h), 0.0))
        else:
            w = rng.uniform(*ranges.leap_w)
            obstacles.append(("gap", w, 0.0, rng.uniform(*ranges.leap_d)))
    used = start_flat + sum(o[1] for o in obstacles) + n * min_flat
    slack = length - used
    if slack < 0:
        raise InfeasibleLayout(
            f"{n} obstacles need {used:.2f} m but the track is {length:.2f} m long"
        )
    shares = rng.dirichlet(np.ones(n + 1)) * slack

    segments = []
    x = 0.0
    for i, (kind, w, h, d) in enumerate(obstacles):
        flat = (start_flat if i == 0 else min_flat) + shares[i]
        segments.append(Segment("flat", x, flat))
        x += flat
        segments.append(Segment(kind, x, w, h=h, d=d))
        x += w
    # the trailing flat (min_flat + last share) absorbs rounding
    segments.append(Segment("flat", x, length - x))
    return Track(tuple(segments), length, seed)


def single_obstacle_track(kind, w, size, *, length=6.0, start=2.0):
    """Flat track with one block (size = h) or gap (size = d) at ``start``."""
    seg = Segment(kind, start, w, h=size if kind == "block" else 0.0, d=size if kind == "gap" else 0.0)
    return Track((Segment("flat", 0.0, start), seg, Segment("flat", seg.end_x, length - seg.end_x)), length)


def _segment_at(track, x):
    for seg in track.segments:
        if seg.start_x <= x < seg.end_x:
            return seg
    return track.segments[-1]


def height_at(track, x):
    """Terrain height and gap flag at ``x``; gaps report ``(-d, True)``."""
    if not 0.0 <= x <= track.length:
        raise OutOfRange(f"x={x} outside track [0, {track.length}]")
    seg = _segment_at(track, x)
    if seg.kind == "block":
        return seg.h, False
    if seg.kind == "gap":
        return -seg.d, True
    return 0.0, False


def active_mode(track, base_x, lookahead, v=0.5):
    """Mode commanded at ``base_x``: the nearest obstacle that is under way or
    starts within ``lookahead`` selects jump/leap, otherwise pace."""
    if not lookahead > 0:
        raise ValueError("lookahead must be positive")
    best = None
    for seg in track.obstacles:
        if seg.end_x <= base_x or seg.start_x > base_x + lookahead:
            continue
        if best is None or seg.start_x < best.start_x:
            best = seg
    if best is None:
        return ModeSpec("pace", v=v)
    if best.kind == "block":
        return ModeSpec("jump", v=v, w=best.w, h=best.h)
    return ModeSpec("leap", v=v, w=best.w, d=best.d)


def mode_sequence(track, v=0.5):
    """One ModeSpec per flat/obstacle window of the track, in order."""
    out = []
    for seg in track.segments:
        if seg.kind == "flat":
            out.append(ModeSpec("pace", v=v))
        elif seg.kind == "block":
            out.append(ModeSpec("jump", v=v, w=seg.w, h=seg.h))
        else:
            out.append(ModeSpec("leap", v=v, w=seg.w, d=seg.d))
    return out


def sample_mode_params(rng, ranges, mode, v=None):
    """Uniform draw of ``mode``'s parameters from the training box."""
    ranges = ModeParamRanges() if ranges is None else ranges
    if mode not in MODE_PARAMS:
        raise ValueError(f"unknown mode {mode!r}")
    values = {name: float(rng.uniform(*ranges.interval(mode, name))) for name in MODE_PARAMS[mode]}
    if mode in ("jump", "leap"):
        values["v"] = float(rng.uniform(*ranges.pace_v)) if v is None else v
    return ModeSpec(mode, **values)


def terrain_scan(track, base_x, n_points=10, span=1.5):
    if n_points < 1 or not span > 0:
        raise ValueError("need n_points >= 1 and span > 0")
    x0 = min(max(base_x, 0.0), track.length)
    ref, _ = height_at(track, x0)
    xs = base_x + np.arange(1, n_points + 1) * (span / n_points)
    xs = np.clip(xs, 0.0, track.length)
    return np.array([height_at(track, x)[0] for x in xs]) - ref


def bridge_gaps(heights, gaps):
    """Heights with every gap cell replaced by the last solid height before it
    (0 if the profile starts inside a gap). Works along the last axis."""
    heights = np.asarray(heights, dtype=float)
    gaps = np.asarray(gaps, dtype=bool)
    idx = np.arange(heights.shape[-1])
    last_solid = np.maximum.accumulate(np.where(gaps, -1, idx), axis=-1)
    support = np.take_along_axis(heights, np.maximum(last_solid, 0), axis=-1)
    return np.where(last_solid < 0, 0.0, support)


@dataclass(frozen=True)
class TerrainWindow:
    """Heightfield slice starting at ``x0`` with uniform spacing ``dx``."""

    x0: float
    dx: float
    heights: np.ndarray
    gaps: np.ndarray = field(default=None)

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=float)
        gaps = np.zeros(heights.shape, bool) if self.gaps is None else np.asarray(self.gaps, bool)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "gaps", gaps)
        support = bridge_gaps(heights, gaps)
        object.__setattr__(self, "_support", support)

    @classmethod
    def from_track(cls, track, x0, span, dx=0.01):
        n = int(math.ceil(span / dx)) + 1
        xs = x0 + np.arange(n) * dx
        hs = np.empty(n)
        gs = np.empty(n, bool)
        for i, x in enumerate(np.clip(xs, 0.0, track.length)):
            hs[i], gs[i] = height_at(track, x)
        return cls(x0, dx, hs, gs)

    @classmethod
    def flat(cls, x0=0.0, span=10.0, dx=0.01, level=0.0):
        n = int(math.ceil(span / dx)) + 1
        return cls(x0, dx, np.full(n, level))

    @property
    def end_x(self):
        return self.x0 + self.dx * (len(self.heights) - 1)

    def _index(self, x):
        idx = np.floor((np.asarray(x, dtype=float) - self.x0) / self.dx + 1e-9).astype(int)
        return np.clip(idx, 0, len(self.heights) - 1)

    def height(self, x):
        return self.heights[self._index(x)]

    def is_gap(self, x):
        return self.gaps[self._index(x)]

    def ground(self, x):
        """Supporting ground level: gaps are bridged at the height of the
        terrain just before them."""
        return self._support[self._index(x)]

    def obstacles(self):
        """(kind, start_x, end_x, size) runs of blocks and gaps in the window."""
        out = []
        base = 0.0
        i, n = 0, len(self.heights)
        while i < n:
            if self.gaps[i]:
                kind = "gap"
            elif self.heights[i] > base + 1e-9:
                kind = "block"
            else:
                i += 1
                continue
            j = i
            while j < n and (self.gaps[j] if kind == "gap" else (not self.gaps[j] and self.heights[j] > base + 1e-9)):
                j += 1
            size = float(-self.heights[i]) if kind == "gap" else float(self.heights[i] - base)
            out.append((kind, self.x0 + i * self.dx, self.x0 + j * self.dx, size))
            i = j
        return out
