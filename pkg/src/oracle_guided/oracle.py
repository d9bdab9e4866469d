"""Closed-loop reference oracles: linear interpolation, LQR and preview control.

Every oracle answers a query ``(x_t, mode, terrain window, horizon)`` with a
finite-horizon state trajectory of the planar SRB model. A horizon is split
into contact and flight phases; flight phases are ballistic (zero control)
and contact phases are filled by the oracle-specific generator.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_matrix, as_vector
from .exceptions import DimensionMismatch, InternalSolverFailure, LengthMismatch, NonConvergence
from .lti import (
    GRAV, N_STATE, OMEGA, PX, PZ, THETA, VX, VZ,
    SrbParams, build_srb_lti, gravity_feedforward, lqr_closed_loop, rollout_lti, solve_dare,
)
from .terrain import ModeSpec, TerrainWindow

CONTACT = "contact"
FLIGHT = "flight"
POSITIONS = (PX, PZ, THETA)
VELOCITIES = (VX, VZ, OMEGA)
KINDS = ("li", "lqr", "prev")


@dataclass(frozen=True)
class ReferenceTrajectory:
    states: np.ndarray
    phases: tuple
    horizon_dt: float
    mode_tag: str = "pace"
    controls: np.ndarray = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        object.__setattr__(self, "phases", tuple(self.phases))
        if states.ndim != 2 or len(self.phases) != len(states) - 1:
            raise LengthMismatch(
                f"{len(states)} states need {len(states) - 1} phase labels, got {len(self.phases)}"
            )
        if not np.all(np.isfinite(states)):
            raise ValueError("reference contains non-finite states")
        object.__setattr__(self, "states", states)

    @property
    def horizon(self):
        return len(self.phases)

    def phase_ranges(self):
        return ranges_from_labels(self.phases)


DEFAULT_WEIGHTS = {
    "li": {},
    "lqr": {"q_state": (1.0,) * 6, "r_control": 1e-3},
    "prev": {"q_error": 1e4, "q_increment": (1e4,) * 3 + (1.0,) * 3, "r_control": 1e-5},
}


@dataclass(frozen=True)
class OracleKind:
    """Oracle flavour plus its solver weights.

    ``q_state``/``r_control`` weight the LQR tracker; ``q_error`` is the
    integral (output error) weight and ``q_increment`` the diagonal
    state-increment weight of the preview controller, whose
    control-increment weight is ``r_control``. ``preview_steps`` of None
    means "the horizon". Unset weights take the per-kind defaults.
    """

    kind: str = "prev"
    q_state: tuple = None
    r_control: float = None
    q_error: float = None
    q_increment: tuple = None
    preview_steps: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        base = {"q_state": (1.0,) * 6, "r_control": 1e-3, "q_error": 1.0,
                "q_increment": (1.0,) * 6}
        base.update(DEFAULT_WEIGHTS[self.kind])
        for name, value in base.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        object.__setattr__(self, "q_state", tuple(float(q) for q in self.q_state))
        object.__setattr__(self, "q_increment", tuple(float(q) for q in self.q_increment))
        if len(self.q_state) != 6 or len(self.q_increment) != 6:
            raise DimensionMismatch("q_state and q_increment need 6 entries")
        if self.preview_steps is not None and self.preview_steps < 0:
            raise ValueError("preview_steps must be >= 0")
        if min(self.q_state) < 0 or min(self.q_increment) < 0 or self.q_error < 0:
            raise ValueError("state weights must be non-negative")
        if not self.r_control > 0:
            raise ValueError("r_control must be positive")


@dataclass(frozen=True)
class PreviewGains:
    G_i: np.ndarray      # (m, p) integral-error gain
    G_x: np.ndarray      # (m, n) state-increment gain (reduced state)
    G_p: np.ndarray      # (N_p, m, p) preview gains for reference increments
    P: np.ndarray = None

    @property
    def steps(self):
        return self.G_p.shape[0]


@dataclass(frozen=True)
class OracleQuery:
    x_t: np.ndarray
    mode: ModeSpec
    terrain_window: TerrainWindow
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        x = as_vector(self.x_t, "x_t", size=N_STATE).copy()
        x[GRAV] = 1.0
        object.__setattr__(self, "x_t", x)


@dataclass(frozen=True)
class PlanConfig:
    """Geometry shared by every oracle when laying out a horizon."""

    dt: float = 0.025
    gravity: float = 9.81
    nominal_height: float = 0.55
    margin: float = 0.05
    leap_clearance: float = 0.12
    crouch: float = 0.1
    crouch_steps: int = 6


@dataclass
class HorizonPlan:
    targets: np.ndarray          # (L+1, 3) target positions p_x, p_z, theta
    target_vel: np.ndarray       # (L+1, 3) finite-difference velocities
    phases: list                 # H labels
    flights: list = field(default_factory=list)   # (k_take, k_land, takeoff state)
    heading_speed: float = 0.0

    def target_state(self, k):
        x = np.zeros(N_STATE)
        x[list(POSITIONS)] = self.targets[k]
        x[list(VELOCITIES)] = self.target_vel[k]
        x[GRAV] = 1.0
        return x


def ranges_from_labels(labels):
    out = []
    start = 0
    for k in range(1, len(labels) + 1):
        if k == len(labels) or labels[k] != labels[start]:
            out.append((labels[start], start, k))
            start = k
    return out


def flight_time(clearance, gravity=9.81):
    """Time of a symmetric ballistic hop whose apex is ``clearance`` above takeoff."""
    return 2.0 * math.sqrt(2.0 * max(clearance, 0.0) / gravity)


def heading_speed(mode, cfg):
    v = float(mode.v)
    if mode.mode == "leap" and v > 0:
        t = flight_time(cfg.leap_clearance, cfg.gravity)
        v = max(v, (mode.w + 2.0 * cfg.margin) / t)
    return v


def _flight_windows(q, cfg, v, steps):
    """Ballistic hops scheduled over the obstacles ahead, in step indices."""
    if q.mode.mode not in ("jump", "leap") or v <= 0:
        return []
    g, dt = cfg.gravity, cfg.dt
    x0 = q.x_t[PX]
    win = q.terrain_window
    kind = "block" if q.mode.mode == "jump" else "gap"
    hops = []
    for obs_kind, start, end, size in win.obstacles():
        if obs_kind != kind or end <= x0:
            continue
        if kind == "block":
            z0 = float(win.ground(start - cfg.margin))
            apex = size + cfg.margin
            t_up = math.sqrt(2.0 * apex / g)
            x_take = start - v * t_up
            # land on the block top if the hop is short, past it otherwise
            z1 = z0
            for _ in range(2):
                t_dn = math.sqrt(2.0 * max(z0 + apex - z1, 0.0) / g)
                x_land = x_take + v * (t_up + t_dn)
                z1 = float(win.ground(x_land))
            t_dn = math.sqrt(2.0 * max(z0 + apex - z1, 0.0) / g)
            duration = t_up + t_dn
            vz0 = g * t_up
        else:
            x_take = start - cfg.margin
            duration = (end - start + 2.0 * cfg.margin) / v
            z0 = float(win.ground(x_take))
            vz0 = 0.5 * g * duration
        k_take = int(round((x_take - x0) / (v * dt)))
        k_land = k_take + max(1, int(round(duration / dt)))
        if k_land <= 0 or k_take >= steps:
            continue
        hops.append((k_take, k_land, z0, vz0))
    # keep hops disjoint
    hops.sort()
    out = []
    for hop in hops:
        if out and hop[0] < out[-1][1]:
            continue
        out.append(hop)
    return out


def plan_horizon(q, cfg=None, extra_steps=0):
    """Heading ramp, terrain-following target and contact/flight labels.

    The target covers ``horizon + extra_steps`` steps so preview controllers
    can look past the horizon end.
    """
    cfg = PlanConfig() if cfg is None else cfg
    H = q.horizon
    L = H + extra_steps
    dt, g = cfg.dt, cfg.gravity
    v = heading_speed(q.mode, cfg)
    k = np.arange(L + 1)
    xs = q.x_t[PX] + v * dt * k
    win = q.terrain_window

    z = cfg.nominal_height + win.ground(xs)
    theta = np.zeros(L + 1)
    if q.mode.mode == "flip":
        theta = q.x_t[THETA] + (k / H) * q.mode.r
    hops = _flight_windows(q, cfg, v, L)
    labels = [CONTACT] * L
    for k_take, k_land, z0, vz0 in hops:
        _push_off(z, k_take, z0 + cfg.nominal_height, vz0, cfg)
        lo, hi = max(k_take, 0), min(k_land, L)
        tau = (k[lo : hi + 1] - k_take) * dt
        z[lo : hi + 1] = cfg.nominal_height + z0 + vz0 * tau - 0.5 * g * tau**2
        for j in range(lo, hi):
            labels[j] = FLIGHT
    targets = np.column_stack([xs, z, theta])
    vel = np.empty_like(targets)
    vel[:-1] = np.diff(targets, axis=0) / dt
    vel[-1] = vel[-2] if L >= 1 else 0.0
    vel[:, 0] = v
    return HorizonPlan(targets, vel, labels[:H], hops, v)


def _push_off(z, k_take, z_take, vz0, cfg):
    """Crouch, then accelerate uniformly so takeoff happens at ``z_take``
    with vertical speed ``vz0`` (in place, stance steps before ``k_take``)."""
    if cfg.crouch <= 0 or vz0 <= 0:
        return
    accel = vz0**2 / (2.0 * cfg.crouch)
    n_push = int(math.ceil(2.0 * cfg.crouch / vz0 / cfg.dt))
    k_push = k_take - n_push
    for j in range(max(k_push, 0), min(k_take, len(z))):
        tau = (k_take - j) * cfg.dt
        z[j] = z_take - vz0 * tau + 0.5 * accel * tau**2
    n_c = max(cfg.crouch_steps, 1)
    bottom = z_take - vz0 * n_push * cfg.dt + 0.5 * accel * (n_push * cfg.dt) ** 2
    for j in range(max(k_push - n_c, 0), min(k_push, len(z))):
        s = (j - (k_push - n_c)) / n_c
        z[j] = z[j] + (bottom - z[j]) * 0.5 * (1.0 - math.cos(math.pi * s))


def phase_split(q, cfg=None):
    """Partition of [0, horizon) into (phase, start, stop) ranges."""
    return ranges_from_labels(plan_horizon(q, cfg).phases)


def flight_rollout(model, x_t, steps):
    if steps < 0:
        raise ValueError("steps must be >= 0")
    return rollout_lti(model, x_t, np.zeros((steps, model.control_dim)))


def li_reference(x_t, goal, horizon, dt=0.025, coords=POSITIONS):
    """Linear interpolation of ``coords`` from ``x_t`` to ``goal``.

    Velocities of interpolated coordinates are the constant finite
    difference slope; everything else is carried over from ``x_t``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x_t = as_vector(x_t, "x_t")
    goal = as_vector(goal, "goal", size=len(x_t))
    frac = np.arange(horizon + 1)[:, None] / horizon
    states = np.tile(x_t, (horizon + 1, 1))
    idx = list(coords)
    states[:, idx] = x_t[idx] + frac * (goal[idx] - x_t[idx])
    vel_idx = [c + 3 for c in idx if c + 3 < len(x_t) and c in POSITIONS]
    if vel_idx:
        pos_idx = [c - 3 for c in vel_idx]
        states[:, vel_idx] = (goal[pos_idx] - x_t[pos_idx]) / (horizon * dt)
    return ReferenceTrajectory(states, [CONTACT] * horizon, dt)


def li_query(model, q, cfg=None):
    """Piecewise interpolation: contact ranges interpolate toward the target at
    the end of the range (the takeoff state before a hop), flight ranges are
    ballistic from there."""
    cfg = PlanConfig(dt=model.dt) if cfg is None else cfg
    H = q.horizon
    plan = plan_horizon(q, cfg)
    states = np.empty((H + 1, N_STATE))
    states[0] = q.x_t
    for phase, s, e in ranges_from_labels(plan.phases):
        if phase == FLIGHT:
            states[s : e + 1] = flight_rollout(model, states[s], e - s)
            continue
        goal = plan.target_state(e)
        seg = li_reference(states[s], goal, e - s, cfg.dt).states
        if e < H and plan.phases[e] == FLIGHT:
            seg[-1] = goal            # hand the hop its takeoff velocity
        seg[0] = states[s]
        states[s : e + 1] = seg
    _apply_heading(states, plan)
    return ReferenceTrajectory(states, plan.phases, cfg.dt, q.mode.mode)


def _apply_heading(states, plan):
    # heading is a kinematic ramp at the commanded speed for every oracle
    states[:, PX] = plan.targets[: len(states), 0]
    states[:, VX] = plan.heading_speed


def lift_outputs(y_ref, dt, heading_speed=None):
    """Full-state reference from output positions (p_x, p_z, theta)."""
    y_ref = np.asarray(y_ref, dtype=float)
    if y_ref.ndim != 2 or y_ref.shape[1] != 3:
        raise DimensionMismatch("y_ref must have shape (steps, 3)")
    x = np.zeros((len(y_ref), N_STATE))
    x[:, list(POSITIONS)] = y_ref
    if len(y_ref) > 1:
        vel = np.empty_like(y_ref)
        vel[:-1] = np.diff(y_ref, axis=0) / dt
        vel[-1] = vel[-2]
        x[:, list(VELOCITIES)] = vel
    if heading_speed is not None:
        x[:, VX] = heading_speed
    x[:, GRAV] = 1.0
    return x


def lqr_reference(model, sol, q, y_ref, phases=None, heading=None):
    """Reactive LQR tracking of the lifted reference; u = 0 in flight."""
    H = q.horizon
    y_ref = np.asarray(y_ref, dtype=float)
    if len(y_ref) < H + 1:
        raise DimensionMismatch(f"y_ref needs {H + 1} rows, got {len(y_ref)}")
    if sol.K.shape != (model.control_dim, model.state_dim):
        raise DimensionMismatch("gain does not match the model")
    phases = [CONTACT] * H if phases is None else list(phases)
    x_ref = lift_outputs(y_ref, model.dt, heading)
    states = np.empty((H + 1, model.state_dim))
    controls = np.zeros((H, model.control_dim))
    states[0] = q.x_t
    for k in range(H):
        if phases[k] == CONTACT:
            controls[k] = -sol.K @ (states[k] - x_ref[k]) + _gravity_column(model, sol)
        states[k + 1] = model.A @ states[k] + model.B @ controls[k]
    return ReferenceTrajectory(states, phases, model.dt, q.mode.mode, controls)


def _gravity_column(model, sol):
    # -K (x - x_ref) cancels the constant coordinate; put its feed-forward back
    return -sol.K[:, -1] if model.augmented else 0.0


def preview_gains(model, Q_e, Q_x, R, N_p):
    """Integral-action preview controller in increment form.

    Augmented state X_k = [e_k; dx_k] with e = C x - r and dx the state
    increment (gravity coordinate dropped); input is the control increment.
    Returns gains for

        du_k = -G_i e_k - G_x dx_k - sum_j G_p[j] dr_{k+j},   j = 1..N_p
    """
    if N_p < 1:
        raise ValueError("N_p must be >= 1")
    A, B = model.reduced()
    n, m = B.shape
    C = model.C[:, :n]
    p = C.shape[0]
    Q_x = as_matrix(Q_x, "Q_x", square=True)
    if model.augmented and Q_x.shape[0] == model.state_dim:
        Q_x = Q_x[:-1, :-1]
    R = as_matrix(R, "R", square=True)
    if Q_x.shape[0] != n or R.shape[0] != m:
        raise DimensionMismatch("Q_x/R do not match the model")

    Phi = np.block([[np.eye(p), C @ A], [np.zeros((n, p)), A]])
    G = np.vstack([C @ B, B])
    G_R = np.vstack([-np.eye(p), np.zeros((n, p))])
    Q = np.zeros((p + n, p + n))
    Q[:p, :p] = Q_e * np.eye(p)
    Q[p:, p:] = Q_x
    sol = solve_dare(Phi, G, Q, R)
    inner = R + G.T @ sol.P @ G
    K = sol.K
    A_cl = Phi - G @ K
    G_p = np.empty((N_p, m, p))
    M = sol.P @ G_R
    for j in range(N_p):
        G_p[j] = np.linalg.solve(inner, G.T @ M)
        M = A_cl.T @ M
    return PreviewGains(G_i=K[:, :p], G_x=K[:, p:], G_p=G_p, P=sol.P)


def preview_reference(model, gains, q, y_future, phases=None, u0=None):
    """Simulate the preview controller over the horizon; u = 0 in flight.

    ``y_future`` holds output references r_0 .. r_{H+N_p}. The control
    increment state restarts at every contact range: the control resumes
    from the gravity feed-forward and the previous increment is taken from
    the state's own velocities.
    """
    H = q.horizon
    N_p = gains.steps
    y_future = np.asarray(y_future, dtype=float)
    if y_future.ndim == 1:
        y_future = y_future[:, None]
    if len(y_future) < H + N_p + 1:
        raise DimensionMismatch(f"y_future needs {H + N_p + 1} rows, got {len(y_future)}")
    A_r, _ = model.reduced()
    n = A_r.shape[0]
    C = model.C[:, :n]
    if y_future.shape[1] != C.shape[0]:
        raise DimensionMismatch("y_future width does not match the model output")
    phases = [CONTACT] * H if phases is None else list(phases)
    hover = gravity_feedforward(model) if u0 is None else np.asarray(u0, float)

    dr = np.diff(y_future, axis=0)                  # dr[k] = r_{k+1} - r_k
    windows = np.lib.stride_tricks.sliding_window_view(dr[: H + N_p - 1], N_p, axis=0)
    feedforward = np.einsum("jmp,kpj->km", gains.G_p, windows[:H])
    states = np.empty((H + 1, model.state_dim))
    controls = np.zeros((H, model.control_dim))
    states[0] = q.x_t
    u = hover.copy()
    dx = None
    for k in range(H):
        x = states[k]
        if phases[k] == CONTACT:
            if dx is None:
                u = hover.copy()
                dx = _velocity_increment(x[:n], model.dt)
            e = C @ x[:n] - y_future[k]
            du = -gains.G_i @ e - gains.G_x @ dx - feedforward[k]
            u = u + du
            controls[k] = u
        else:
            dx = None
        states[k + 1] = model.A @ x + model.B @ controls[k]
        if dx is not None:
            dx = states[k + 1][:n] - x[:n]
    return ReferenceTrajectory(states, phases, model.dt, q.mode.mode, controls)


def _velocity_increment(x, dt):
    dx = np.zeros_like(x)
    dx[list(POSITIONS)] = x[list(VELOCITIES)] * dt
    return dx


def measure_deviation(ref_a, ref_b, W):
    """max_k sqrt(sum_i W_i (a_ki - b_ki)^2)."""
    a = ref_a.states if isinstance(ref_a, ReferenceTrajectory) else np.asarray(ref_a, float)
    b = ref_b.states if isinstance(ref_b, ReferenceTrajectory) else np.asarray(ref_b, float)
    if a.shape != b.shape:
        raise LengthMismatch(f"trajectories differ in shape: {a.shape} vs {b.shape}")
    W = np.asarray(W, dtype=float).reshape(-1)
    d = a[:, : len(W)] - b[:, : len(W)]
    return float(np.sqrt(np.max(d**2 @ W, initial=0.0)))


def weighted_error(x, x_ref, W):
    W = np.asarray(W, dtype=float).reshape(-1)
    d = np.asarray(x, float)[..., : len(W)] - np.asarray(x_ref, float)[..., : len(W)]
    return np.sqrt((d**2) @ W)


class ReferenceOracle(BaseEstimator):
    """Oracle as an estimator: ``fit`` precomputes the model and gains,
    ``predict`` answers queries. Immutable after fitting."""

    def __init__(self, kind="prev", dt=0.025, mass=12.0, inertia=0.4, gravity=9.81,
                 leg_length=0.44, nominal_height=0.55, margin=0.05, leap_clearance=0.12,
                 crouch=0.1,
                 q_state=None, r_control=None, q_error=None, q_increment=None,
                 preview_steps=None):
        self.kind = kind
        self.dt = dt
        self.mass = mass
        self.inertia = inertia
        self.gravity = gravity
        self.leg_length = leg_length
        self.nominal_height = nominal_height
        self.margin = margin
        self.leap_clearance = leap_clearance
        self.crouch = crouch
        self.q_state = q_state
        self.r_control = r_control
        self.q_error = q_error
        self.q_increment = q_increment
        self.preview_steps = preview_steps

    @property
    def oracle_kind(self):
        return OracleKind(self.kind, self.q_state, self.r_control, self.q_error,
                          self.q_increment, self.preview_steps)

    def fit(self, X=None, y=None, horizon=30):
        kind = self.oracle_kind
        params = SrbParams(self.mass, self.inertia, self.gravity, self.leg_length)
        self.model_ = build_srb_lti(params, 0.0, self.dt)
        self.plan_cfg_ = PlanConfig(self.dt, self.gravity, self.nominal_height, self.margin,
                                    self.leap_clearance, self.crouch)
        self.horizon_ = int(horizon)
        m = self.model_.control_dim
        try:
            if kind.kind == "lqr":
                self.lqr_ = lqr_closed_loop(self.model_, np.diag(kind.q_state), kind.r_control * np.eye(m))
            elif kind.kind == "prev":
                n_p = self.horizon_ if kind.preview_steps is None else kind.preview_steps
                self.preview_model_ = build_srb_lti(params, 0.0, self.dt, output=(PZ, THETA))
                self.gains_ = preview_gains(
                    self.preview_model_, kind.q_error, np.diag(kind.q_increment),
                    kind.r_control * np.eye(m), max(n_p, 1),
                )
        except NonConvergence as exc:
            raise InternalSolverFailure(str(exc)) from exc
        return self

    def predict(self, q):
        return query(self, q)

    def target(self, q):
        """Terrain-following target profile the oracle aims at."""
        return plan_horizon(q, self.plan_cfg_)


def query(oracle, q):
    """Reference trajectory from ``oracle`` (a fitted ReferenceOracle)."""
    model, cfg = oracle.model_, oracle.plan_cfg_
    if oracle.kind == "li":
        return li_query(model, q, cfg)
    if oracle.kind == "lqr":
        plan = plan_horizon(q, cfg)
        ref = lqr_reference(model, oracle.lqr_, q, plan.targets, plan.phases, plan.heading_speed)
    else:
        plan = plan_horizon(q, cfg, extra_steps=oracle.gains_.steps)
        ref = preview_reference(oracle.preview_model_, oracle.gains_, q,
                                plan.targets[:, 1:], plan.phases)
    states = ref.states.copy()
    _apply_heading(states, plan)
    return ReferenceTrajectory(states, ref.phases, ref.horizon_dt, ref.mode_tag, ref.controls)


def step_reference_suite(horizon=30, speeds=(0.3, 0.55, 0.8), heights=(0.05, 0.1, 0.15),
                         distances=(0.1, 0.25, 0.4), nominal_height=0.55):
    """Pace-mode queries facing a step up at varying speed, height and distance."""
    xs = np.arange(0.0, 4.0, 0.01)
    out = []
    for v in speeds:
        for h in heights:
            for d in distances:
                x = np.zeros(N_STATE)
                x[PX], x[PZ], x[VX], x[GRAV] = 0.5, nominal_height, v, 1.0
                win = TerrainWindow(0.0, 0.01, np.where(xs >= 0.5 + d, h, 0.0))
                out.append(OracleQuery(x, ModeSpec("pace", v=v), win, horizon))
    return out


def tracking_cost(oracle, q):
    """Sum of squared base-height errors against the terrain-following target."""
    ref = oracle.predict(q)
    target = oracle.target(q).targets[: q.horizon + 1]
    return float(np.sum((ref.states[:, PZ] - target[:, 1]) ** 2))


REFERENCE_COLUMNS = ("step", "phase", "p_x", "p_z", "theta", "v_x", "v_z", "omega")


def reference_rows(ref):
    rows = []
    for k, x in enumerate(ref.states):
        phase = ref.phases[k] if k < ref.horizon else ref.phases[-1]
        rows.append([k, phase, *(float(v) for v in x[:6])])
    return rows
