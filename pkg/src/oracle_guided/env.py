"""Planar point-foot biped on procedural parkour tracks.

The simulator is vectorized over a batch of independent environments; a
single environment is a batch of one. Episodes terminate when the policy
state leaves the rho-neighbourhood of the oracle reference, when the robot
falls, or at the step limit.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch, SteppingTerminatedEpisode
from .lti import N_STATE, PX, PZ, THETA, VX, VZ, OMEGA
from .oracle import OracleKind, OracleQuery, ReferenceOracle, weighted_error
from .terrain import ModeParamRanges, TerrainWindow, active_mode, bridge_gaps, generate_track

TERMINATIONS = ("none", "rho_violation", "fall", "time_limit")
NONE, RHO_VIOLATION, FALL, TIME_LIMIT = range(4)

OBS_COMPONENTS = ("z", "c", "h")
PROPRIO_DIM = 12
LATENT_DIM = 2
CLOCK_DIM = 2
ACTION_DIM = 8


@dataclass(frozen=True)
class PhysicsConfig:
    dt: float = 0.025
    substeps: int = 5
    mass: float = 12.0
    inertia: float = 0.4
    gravity: float = 9.81
    mu: float = 0.6
    leg_length: float = 0.44
    nominal_height: float = 0.55
    hip_offset: float = 0.15
    stance_width: float = 0.08
    fx_scale: float = 0.6          # |f_x| request scale in units of m*g
    tau_max: float = 10.0
    swing_reach: float = 0.2
    swing_clearance: float = 0.08
    swing_speed: float = 3.0
    swing_lift_time: float = 0.1
    descend_speed: float = 1.5
    fall_height: float = 0.3
    non_toe_tol: float = 0.02
    resolution: float = 0.01

    def __post_init__(self):
        for name in ("dt", "mass", "inertia", "gravity", "leg_length", "nominal_height",
                     "resolution"):
            if not getattr(self, name) > 0:
                raise ValueError(f"physics.{name} must be positive")
        if self.substeps < 1:
            raise ValueError("physics.substeps must be >= 1")
        if self.mu < 0:
            raise ValueError("physics.mu must be non-negative")


@dataclass(frozen=True)
class EnvConfig:
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    ranges: ModeParamRanges = field(default_factory=ModeParamRanges)
    oracle: OracleKind = field(default_factory=OracleKind)
    rho: float = 0.5
    W: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    horizon: int = 30
    episode_limit: int = 400
    track_length: float = 10.0
    obstacle_density: float = 0.2
    obstacle_kinds: tuple = ("block", "gap")
    min_flat: float = 1.0
    start_flat: float = 1.0
    frame_stack: int = 4
    scan_points: int = 10
    scan_span: float = 1.5
    obs_mask: tuple = ("z", "c", "h")

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if len(self.W) != 6 or min(self.W) < 0:
            raise ValueError("W needs 6 non-negative entries")
        if self.horizon < 1 or self.episode_limit < 1 or self.frame_stack < 1:
            raise ValueError("horizon, episode_limit and frame_stack must be >= 1")
        unknown = set(self.obs_mask) - set(OBS_COMPONENTS)
        if unknown:
            raise ValueError(f"unknown observation components {sorted(unknown)}")
        object.__setattr__(self, "W", tuple(float(w) for w in self.W))
        object.__setattr__(self, "obs_mask", tuple(c for c in OBS_COMPONENTS if c in self.obs_mask))

    @property
    def frame_dim(self):
        return PROPRIO_DIM + LATENT_DIM + CLOCK_DIM + self.scan_points

    @property
    def obs_dim(self):
        return self.frame_dim * self.frame_stack


@dataclass
class EnvState:
    """Batched physical state. ``base`` columns: p_x, p_z, theta, v_x, v_z, omega."""

    base: np.ndarray            # (N, 6)
    feet: np.ndarray            # (N, 2, 2) world x, z
    contact: np.ndarray         # (N, 2) bool
    swing_t: np.ndarray         # (N, 2) time since lift-off
    t: np.ndarray               # (N,) control steps since reset
    k: np.ndarray               # (N,) step index into the current reference
    ref: np.ndarray             # (N, H+1, 7)
    x_query: np.ndarray         # (N,) p_x at the last oracle query
    cmd_v: np.ndarray           # (N,) commanded pace speed
    z: np.ndarray               # (N, 2) latent mode command
    heights: np.ndarray         # (N, M) terrain heightfield
    support: np.ndarray         # (N, M) gap-bridged heightfield
    gaps: np.ndarray            # (N, M)
    tracks: list
    modes: list
    done: np.ndarray            # (N,) bool

    @property
    def n(self):
        return len(self.base)

    def copy(self):
        return EnvState(
            self.base.copy(), self.feet.copy(), self.contact.copy(), self.swing_t.copy(),
            self.t.copy(), self.k.copy(), self.ref.copy(), self.x_query.copy(),
            self.cmd_v.copy(), self.z.copy(), self.heights, self.support, self.gaps,
            list(self.tracks), list(self.modes), self.done.copy(),
        )

    def state_vector(self):
        """(N, 7) state in the oracle layout."""
        return np.column_stack([self.base, np.ones(self.n)])

    def ref_state(self):
        return self.ref[np.arange(self.n), self.k]


def _lookup(field_, x, res):
    """Per-row lookup of ``field_`` (N, M) at positions ``x`` (N,) or (N, K)."""
    n, m = field_.shape
    idx = (np.asarray(x, dtype=float) * (1.0 / res) + 1e-9).astype(np.intp)
    np.clip(idx, 0, m - 1, out=idx)
    offsets = np.arange(n, dtype=np.intp) * m
    if idx.ndim > 1:
        offsets = offsets.reshape((-1,) + (1,) * (idx.ndim - 1))
    return field_.ravel()[idx + offsets]


def hip_positions(base, phys):
    s, c = np.sin(base[:, THETA]), np.cos(base[:, THETA])
    return np.column_stack([base[:, PX] + phys.hip_offset * s, base[:, PZ] - phys.hip_offset * c])


def scale_action(action, phys):
    """Map an action in [-1, 1]^8 to (forces (N,2,2), moments (N,2), swing offsets (N,2))."""
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    if a.shape[-1] != ACTION_DIM:
        raise DimensionMismatch(f"action must have {ACTION_DIM} entries, got {a.shape[-1]}")
    a = a.reshape(-1, ACTION_DIM)
    mg = phys.mass * phys.gravity
    per_foot = a[:, :6].reshape(-1, 2, 3)
    fz = np.maximum(0.5 * mg * (1.0 + 2.0 * per_foot[:, :, 1]), 0.0)
    fx = per_foot[:, :, 0] * phys.fx_scale * mg
    fx = np.clip(fx, -phys.mu * fz, phys.mu * fz)
    tau = per_foot[:, :, 2] * phys.tau_max
    return np.stack([fx, fz], axis=-1), tau, a[:, 6:] * phys.swing_reach


def dynamics_step(state, action, phys):
    """Advance one control step (``phys.substeps`` semi-implicit Euler substeps).

    Stance feet apply the friction-clamped forces and moments; swing feet
    are kinematic. A stance foot lifts off when its leg over-extends or its
    normal force request is zero; a swing foot touches down when it reaches
    solid ground after the minimum lift time.
    """
    s = state.copy()
    forces, tau, offsets = scale_action(action, phys)
    if len(forces) != s.n:
        raise DimensionMismatch(f"expected {s.n} actions, got {len(forces)}")
    h = phys.dt / phys.substeps
    res = phys.resolution
    L = phys.leg_length
    # feet with no normal force request leave the ground
    released = s.contact & (forces[:, :, 1] <= 0.0)
    s.contact &= ~released
    s.swing_t[released] = 0.0
    F = np.empty((s.n, 2))
    vmax = phys.swing_speed * h
    for _ in range(phys.substeps):
        c = s.contact
        F[:, 0] = forces[:, 0, 0] * c[:, 0] + forces[:, 1, 0] * c[:, 1]
        F[:, 1] = forces[:, 0, 1] * c[:, 0] + forces[:, 1, 1] * c[:, 1]
        T = tau[:, 0] * c[:, 0] + tau[:, 1] * c[:, 1]
        b = s.base
        b[:, VX] += F[:, 0] * (h / phys.mass)
        b[:, VZ] += (F[:, 1] / phys.mass - phys.gravity) * h
        b[:, OMEGA] += T * (h / phys.inertia)
        b[:, PX] += b[:, VX] * h
        b[:, PZ] += b[:, VZ] * h
        b[:, THETA] += b[:, OMEGA] * h

        hip = hip_positions(b, phys)
        hx, hz = hip[:, 0:1], hip[:, 1:2]
        fx = s.feet[:, :, 0]
        fz = s.feet[:, :, 1]
        lift = c & ((fx - hx) ** 2 + (fz - hz) ** 2 > L * L)
        c &= ~lift
        s.swing_t[lift] = 0.0

        sw = ~c
        s.swing_t += h * sw
        nx = fx + np.minimum(np.maximum(hx + offsets - fx, -vmax), vmax)
        ground = _lookup(s.heights, nx, res)
        rising = s.swing_t < phys.swing_lift_time
        up = np.minimum(np.maximum(ground + phys.swing_clearance - fz, -vmax), vmax)
        nz = np.where(rising, fz + up, fz - phys.descend_speed * h)
        dx, dz = nx - hx, nz - hz
        dist = np.sqrt(dx * dx + dz * dz)
        scale = np.where(dist > L, L / np.maximum(dist, 1e-12), 1.0)
        px = hx + dx * scale
        pz = hz + dz * scale
        ground = _lookup(s.heights, px, res)
        pz = np.maximum(pz, ground)
        reach = (px - hx) ** 2 + (pz - hz) ** 2 <= L * L + 1e-9
        touch = sw & ~rising & (pz <= ground + 1e-9) & reach
        s.feet[:, :, 0] = np.where(sw, px, fx)
        s.feet[:, :, 1] = np.where(sw, pz, fz)
        c |= touch
    return s


def ground_under(state, phys, x=None):
    x = state.base[:, PX] if x is None else x
    return _lookup(state.support, x, phys.resolution)


def non_toe_contact(state, phys):
    """Body scraping: the hip point within ``non_toe_tol`` of the local
    terrain while at least one foot is airborne."""
    hip = hip_positions(state.base, phys)
    clearance = hip[:, 1] - _lookup(state.support, hip[:, 0], phys.resolution)
    return (clearance <= phys.non_toe_tol) & ~np.all(state.contact, axis=1)


def compute_reward(x, ref_state, action, non_toe):
    """(r, r_track, r_regulation), batched over the leading axis.

    ``x``/``ref_state`` use the oracle layout (p_x, p_z, theta, ...).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ref_state = np.atleast_2d(np.asarray(ref_state, dtype=float))
    action = np.atleast_2d(np.asarray(action, dtype=float))
    er_p = np.linalg.norm(x[:, [PX, PZ]] - ref_state[:, [PX, PZ]], axis=1)
    er_o = np.abs(x[:, THETA] - ref_state[:, THETA])
    r_track = 0.475 * np.exp(-5.0 * er_p) + 0.475 * np.exp(-5.0 * er_o)
    r_reg = 0.05 * np.exp(-0.01 * np.linalg.norm(action, axis=1)) - 0.3 * np.asarray(non_toe, dtype=float)
    return r_track + r_reg, r_track, r_reg


def check_termination(x, ref_state, W, rho, t, limit, rel_height, fall_height=0.3):
    """Termination code per env: rho_violation, then fall, then time_limit."""
    dev = np.atleast_1d(weighted_error(np.atleast_2d(x), np.atleast_2d(ref_state), W))
    rel_height = np.atleast_1d(rel_height)
    t = np.broadcast_to(np.asarray(t), dev.shape)
    code = np.full(dev.shape, NONE)
    code[t >= limit] = TIME_LIMIT
    code[rel_height < fall_height] = FALL
    code[dev > rho] = RHO_VIOLATION
    return code


def clock(phase):
    phase = np.asarray(phase, dtype=float)
    return np.stack([np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase)], axis=-1)


def build_observation(x_tilde, z, phase, scan, mask=OBS_COMPONENTS):
    """One frame [x~, z, c, h]; disabled components are zero-filled."""
    x_tilde = np.atleast_2d(np.asarray(x_tilde, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    scan = np.atleast_2d(np.asarray(scan, dtype=float))
    if x_tilde.shape[1] != PROPRIO_DIM:
        raise DimensionMismatch(f"x~ must have {PROPRIO_DIM} entries")
    if z.shape[1] != LATENT_DIM:
        raise DimensionMismatch(f"z must have {LATENT_DIM} entries")
    c = np.atleast_2d(clock(phase))
    parts = {"z": z, "c": c, "h": scan}
    out = [x_tilde]
    for name in OBS_COMPONENTS:
        out.append(parts[name] if name in mask else np.zeros_like(parts[name]))
    n = max(len(part) for part in out)
    return np.concatenate([np.broadcast_to(part, (n, part.shape[1])) for part in out], axis=1)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: np.ndarray
    r_track: np.ndarray
    r_regulation: np.ndarray
    termination: np.ndarray
    info: dict


class ParkourEnv:
    """Batch of ``n_envs`` parkour environments sharing one configuration.

    Each environment owns its seed stream; with ``auto_reset`` finished
    episodes restart on a fresh track inside ``step`` and the terminal
    observation is reported in ``info["final_obs"]``.
    """

    def __init__(self, config=None, n_envs=1, seed=0, encoder=None, auto_reset=False,
                 oracle=None):
        self.config = EnvConfig() if config is None else config
        self.n_envs = int(n_envs)
        self.seed = int(seed)
        self.encoder = encoder
        self.auto_reset = auto_reset
        cfg = self.config
        ph = cfg.physics
        if oracle is None:
            ok = cfg.oracle
            oracle = ReferenceOracle(
                kind=ok.kind, dt=ph.dt, mass=ph.mass, inertia=ph.inertia, gravity=ph.gravity,
                leg_length=ph.leg_length, nominal_height=ph.nominal_height,
                q_state=ok.q_state, r_control=ok.r_control, q_error=ok.q_error,
                q_increment=ok.q_increment, preview_steps=ok.preview_steps,
            ).fit(horizon=cfg.horizon)
        self.oracle = oracle
        self._rngs = [np.random.default_rng([self.seed, i]) for i in range(self.n_envs)]
        n_cells = int(round((cfg.track_length + 5.0) / ph.resolution)) + 1
        self._n_cells = n_cells
        self.state = None
        self.frames = None
        self._stats = None
        self.episodes = []

    # -- episode bookkeeping -------------------------------------------------
    @property
    def obs_dim(self):
        return self.config.obs_dim

    @property
    def act_dim(self):
        return ACTION_DIM

    def _new_track(self, i):
        cfg = self.config
        rng = self._rngs[i]
        track = generate_track(
            int(rng.integers(2**63 - 1)), cfg.ranges, cfg.track_length, cfg.obstacle_density,
            min_flat=cfg.min_flat, start_flat=cfg.start_flat, kinds=cfg.obstacle_kinds,
        )
        v = float(rng.uniform(*cfg.ranges.pace_v))
        return track, v

    def _install(self, i, track, v):
        ph = self.config.physics
        s = self.state
        pad = self._n_cells * ph.resolution - track.length
        _, heights, gaps = track.heightfield(ph.resolution, pad=max(pad, 0.0))
        heights, gaps = heights[: self._n_cells], gaps[: self._n_cells]
        s.heights[i] = heights
        s.gaps[i] = gaps
        s.support[i] = bridge_gaps(heights, gaps)
        s.tracks[i] = track
        s.cmd_v[i] = v
        h0 = s.support[i, 0]
        s.base[i] = [0.0, ph.nominal_height + h0, 0.0, 0.0, 0.0, 0.0]
        hip_x = 0.0
        s.feet[i] = [[hip_x - ph.stance_width, h0], [hip_x + ph.stance_width, h0]]
        s.contact[i] = True
        s.swing_t[i] = 0.0
        s.t[i] = 0
        s.done[i] = False
        self._requery(np.array([i]))
        self._stats[i] = {"ret": 0.0, "j_tilde": 0.0, "x0": 0.0, "max_v": 0.0,
                          "max_acc": 0.0, "len": 0}

    def _blank_state(self):
        n, m, H = self.n_envs, self._n_cells, self.config.horizon
        return EnvState(
            base=np.zeros((n, 6)), feet=np.zeros((n, 2, 2)), contact=np.zeros((n, 2), bool),
            swing_t=np.zeros((n, 2)), t=np.zeros(n, int), k=np.zeros(n, int),
            ref=np.zeros((n, H + 1, N_STATE)), x_query=np.zeros(n), cmd_v=np.zeros(n),
            z=np.zeros((n, LATENT_DIM)), heights=np.zeros((n, m)), support=np.zeros((n, m)),
            gaps=np.zeros((n, m), bool), tracks=[None] * n, modes=[None] * n,
            done=np.zeros(n, bool),
        )

    def reset(self, tracks=None, speeds=None):
        """Reset every env; ``tracks``/``speeds`` override the random draws."""
        self.state = self._blank_state()
        self._stats = [None] * self.n_envs
        for i in range(self.n_envs):
            track, v = self._new_track(i)
            if tracks is not None:
                track = tracks[i]
            if speeds is not None:
                v = float(speeds[i])
            self._install(i, track, v)
        frame = self._frame()
        self.frames = np.repeat(frame[:, None, :], self.config.frame_stack, axis=1)
        return self.observation()

    def observation(self):
        return self.frames.reshape(self.n_envs, -1).copy()

    # -- oracle and observations ---------------------------------------------
    def _requery(self, idx):
        cfg = self.config
        ph = cfg.physics
        s = self.state
        res = ph.resolution
        for i in idx:
            x = np.r_[s.base[i], 1.0]
            v = s.cmd_v[i]
            lookahead = max(cfg.horizon * ph.dt * v, res)
            mode = active_mode(s.tracks[i], min(x[PX], s.tracks[i].length), lookahead, v=v)
            i0 = int(np.clip(np.floor(x[PX] / res), 0, self._n_cells - 1))
            i1 = min(i0 + int(4.0 / res), self._n_cells)
            if i1 - i0 < 2:
                i0 = max(i1 - 2, 0)
            win = TerrainWindow(i0 * res, res, s.heights[i, i0:i1], s.gaps[i, i0:i1])
            ref = self.oracle.predict(OracleQuery(x, mode, win, cfg.horizon))
            s.ref[i] = ref.states
            s.modes[i] = mode
            s.k[i] = 0
            s.x_query[i] = x[PX]
        if self.encoder is not None and len(idx):
            s.z[idx] = self.encoder.encode_states(s.ref[idx])

    def scan(self):
        cfg = self.config
        s = self.state
        res = cfg.physics.resolution
        xs = s.base[:, PX:PX + 1] + np.arange(1, cfg.scan_points + 1) * (cfg.scan_span / cfg.scan_points)
        here = _lookup(s.heights, s.base[:, PX], res)
        return _lookup(s.heights, xs, res) - here[:, None]

    def proprio(self):
        s = self.state
        ph = self.config.physics
        b = s.base
        rel = s.feet - b[:, None, [PX, PZ]]
        return np.column_stack([
            b[:, PX] - s.x_query,
            b[:, PZ] - ground_under(s, ph),
            b[:, THETA], b[:, VX], b[:, VZ], b[:, OMEGA],
            rel.reshape(-1, 4), s.contact.astype(float),
        ])

    def _frame(self):
        s = self.state
        phase = s.k / self.config.horizon
        return build_observation(self.proprio(), s.z, phase, self.scan(), self.config.obs_mask)

    # -- stepping ------------------------------------------------------------
    def step(self, action):
        cfg = self.config
        ph = cfg.physics
        s = self.state
        if s is None:
            raise SteppingTerminatedEpisode("call reset() before step()")
        if np.any(s.done):
            raise SteppingTerminatedEpisode("episode already terminated; reset first")
        action = np.clip(np.asarray(action, dtype=float).reshape(self.n_envs, ACTION_DIM), -1.0, 1.0)
        prev_x = s.base[:, PX].copy()
        prev_v = s.base[:, VX].copy()
        self.state = s = dynamics_step(s, action, ph)
        s.t += 1
        s.k += 1
        x = s.state_vector()
        ref_state = s.ref_state()
        r, r_track, r_reg = compute_reward(x, ref_state, action, non_toe_contact(s, ph))
        rel_h = s.base[:, PZ] - ground_under(s, ph)
        term = check_termination(x, ref_state, cfg.W, cfg.rho, s.t, cfg.episode_limit, rel_h,
                                 ph.fall_height)
        dev = weighted_error(x, ref_state, cfg.W)
        speed = (s.base[:, PX] - prev_x) / ph.dt
        accel = (s.base[:, VX] - prev_v) / ph.dt
        info = {
            "heading_speed": speed, "acceleration": accel, "position": s.base[:, PX].copy(),
            "deviation": dev, "ref_state": ref_state.copy(),
            "mode": [m.mode for m in s.modes],
        }
        for i in range(self.n_envs):
            st = self._stats[i]
            st["ret"] += float(r[i])
            st["j_tilde"] -= float(dev[i])
            st["max_v"] = max(st["max_v"], float(s.base[i, VX]))
            st["max_acc"] = max(st["max_acc"], abs(float(accel[i])))
            st["len"] += 1

        done = term != NONE
        s.done = done.copy()
        live = np.flatnonzero(~done & (s.k >= cfg.horizon))
        if len(live):
            self._requery(live)
        frame = self._frame()
        self.frames = np.concatenate([self.frames[:, 1:], frame[:, None, :]], axis=1)
        obs = self.observation()
        info["final_obs"] = obs.copy()
        finished = np.flatnonzero(done)
        for i in finished:
            st = self._stats[i]
            self.episodes.append({
                "env": int(i), "return": st["ret"], "length": st["len"],
                "termination": TERMINATIONS[term[i]], "j_tilde": st["j_tilde"],
                "j_true": float(s.base[i, PX] - st["x0"]), "max_speed": st["max_v"],
                "max_accel": st["max_acc"], "track_seed": int(s.tracks[i].seed),
            })
        if self.auto_reset and len(finished):
            for i in finished:
                track, v = self._new_track(i)
                self._install(i, track, v)
            frame = self._frame()
            self.frames[finished] = frame[finished][:, None, :]
            obs = self.observation()
        return StepResult(obs, r, r_track, r_reg, term, info)


def reset(seed, config=None, encoder=None):
    """Single environment reset; returns (env, observation)."""
    env = ParkourEnv(config, n_envs=1, seed=seed, encoder=encoder)
    obs = env.reset()
    return env, obs[0]


def step(env, action):
    return env.step(np.asarray(action, dtype=float).reshape(1, ACTION_DIM))
