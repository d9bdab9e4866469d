"""Discrete-time LTI kernels: Riccati solver, LQR, SRB model, rollouts.

State layout of the planar single-rigid-body (SRB) model::

    x = [p_x, p_z, theta, v_x, v_z, omega, 1]
    u = [f1_x, f1_z, tau1, f2_x, f2_z, tau2]

The trailing constant coordinate carries gravity into the linear map.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix, as_vector
from .exceptions import DimensionMismatch, NonConvergence, SingularInnerMatrix

# state indices of the planar SRB model
PX, PZ, THETA, VX, VZ, OMEGA, GRAV = range(7)
STATE_NAMES = ("p_x", "p_z", "theta", "v_x", "v_z", "omega", "one")
N_STATE = 7
N_CONTROL = 6


@dataclass(frozen=True)
class SrbParams:
    mass: float = 12.0
    inertia: float = 0.4
    gravity: float = 9.81
    leg_length: float = 0.44

    def __post_init__(self):
        for name in ("mass", "inertia", "gravity", "leg_length"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"SrbParams.{name} must be positive, got {value}")


@dataclass(frozen=True)
class LtiModel:
    """x_{k+1} = A x_k + B u_k, y_k = C x_k."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dt: float
    augmented: bool = False
    srb: SrbParams = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        A = as_matrix(self.A, "A", square=True)
        B = as_matrix(self.B, "B")
        C = as_matrix(self.C, "C")
        if B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, A is {A.shape}")
        if C.shape[1] != A.shape[0]:
            raise DimensionMismatch(f"C has {C.shape[1]} columns, A is {A.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.augmented:
            last = np.zeros(A.shape[0])
            last[-1] = 1.0
            if not np.array_equal(A[-1], last) or np.any(B[-1] != 0):
                raise ValueError("augmented model must keep its last coordinate constant")
        for arr in (A, B, C):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def control_dim(self):
        return self.B.shape[1]

    @property
    def output_dim(self):
        return self.C.shape[0]

    def reduced(self):
        """(A, B) with the constant gravity coordinate removed."""
        if not self.augmented:
            return self.A, self.B
        return self.A[:-1, :-1], self.B[:-1]


@dataclass(frozen=True)
class DareSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int


def _riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    inner = R + BtP @ B
    AtPB = A.T @ P @ B
    try:
        gain_term = np.linalg.solve(inner, AtPB.T)
    except np.linalg.LinAlgError as exc:
        raise SingularInnerMatrix("R + B'PB is singular") from exc
    return Q + A.T @ P @ A - AtPB @ gain_term, inner


def _check_inner(inner):
    if inner.size and np.linalg.cond(inner) > 1e12:
        raise SingularInnerMatrix(f"R + B'PB is numerically singular (cond={np.linalg.cond(inner):.3g})")


def dare_residual(A, B, Q, R, P):
    """Max-abs fixed-point residual of the Riccati map, relative to max(1, |P|)."""
    nxt, _ = _riccati_map(A, B, Q, R, P)
    return float(np.max(np.abs(nxt - P)) / max(1.0, np.max(np.abs(P))))


def solve_dare(A, B, Q, R, tol=1e-10, max_iter=10_000, relax=1.0):
    """Solve P = Q + A'PA - A'PB (R + B'PB)^-1 B'PA by fixed-point iteration.

    The iteration starts at P = Q and symmetrizes every iterate. ``relax``
    blends the new iterate with the old one (1.0 is the plain Riccati
    recursion). Convergence is declared when the relative fixed-point
    residual drops below ``tol``.
    """
    A = as_matrix(A, "A", square=True)
    n = A.shape[0]
    B = as_matrix(B, "B")
    Q = as_matrix(Q, "Q", square=True)
    R = as_matrix(R, "R", square=True)
    if B.shape[0] != n or Q.shape[0] != n or R.shape[0] != B.shape[1]:
        raise DimensionMismatch(
            f"incompatible shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}"
        )
    if not 0.0 < relax <= 1.0:
        raise ValueError("relax must lie in (0, 1]")

    P = 0.5 * (Q + Q.T)
    residual = np.inf
    for it in range(1, max_iter + 1):
        nxt, inner = _riccati_map(A, B, Q, R, P)
        nxt = 0.5 * (nxt + nxt.T)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e15:
            raise NonConvergence(f"Riccati iteration diverged after {it} iterations")
        residual = float(np.max(np.abs(nxt - P)) / max(1.0, np.max(np.abs(nxt))))
        P = nxt if relax == 1.0 else (1.0 - relax) * P + relax * nxt
        if residual < tol:
            break
    else:
        raise NonConvergence(
            f"Riccati iteration did not reach tol={tol:g} in {max_iter} iterations "
            f"(residual {residual:.3g})"
        )

    inner = R + B.T @ P @ B
    _check_inner(inner)
    K = np.linalg.solve(inner, B.T @ P @ A)
    return DareSolution(P=P, K=K, residual=dare_residual(A, B, Q, R, P), iterations=it)


def gravity_feedforward(model):
    """Control that cancels the constant (gravity) column of an augmented model.

    Least-squares solution of B u = -(A e_g - e_g); for the SRB model this
    is any hover force split, and lstsq picks the minimum-norm one (equal
    vertical forces on both feet).
    """
    if not model.augmented:
        return np.zeros(model.control_dim)
    drift = model.A[:, -1].copy()
    drift[-1] -= 1.0
    u, *_ = np.linalg.lstsq(model.B, -drift, rcond=None)
    return u


def lqr_closed_loop(model, Q, R, tol=1e-10, max_iter=10_000):
    """LQR gain for ``model``.

    For gravity-augmented models the constant coordinate is uncontrollable
    and must not be weighted, so the DARE is solved on the reduced block and
    the gain is extended with a column that reproduces the gravity
    feed-forward: ``-K x`` then equals ``-K_r x_r + u_hover``. ``Q`` may be
    given at full or reduced size.
    """
    A, B = model.reduced()
    n = A.shape[0]
    Q = as_matrix(Q, "Q", square=True)
    if model.augmented and Q.shape[0] == model.state_dim:
        Q = Q[:-1, :-1]
    R = as_matrix(R, "R", square=True)
    if Q.shape[0] != n or R.shape[0] != model.control_dim:
        raise DimensionMismatch(f"Q{Q.shape}/R{R.shape} do not fit model with n={n}")
    sol = solve_dare(A, B, Q, R, tol=tol, max_iter=max_iter)
    if not model.augmented:
        return sol
    K = np.hstack([sol.K, -gravity_feedforward(model)[:, None]])
    return DareSolution(P=sol.P, K=K, residual=sol.residual, iterations=sol.iterations)


def closed_loop_matrix(model, sol):
    """A - B K on the controllable block (gravity coordinate dropped)."""
    A, B = model.reduced()
    K = sol.K[:, : A.shape[0]]
    return A - B @ K


def discretize_euler(Ac, Bc, dt):
    Ac = as_matrix(Ac, "Ac", square=True)
    Bc = as_matrix(Bc, "Bc")
    if Bc.shape[0] != Ac.shape[0]:
        raise DimensionMismatch(f"Bc has {Bc.shape[0]} rows, Ac is {Ac.shape}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    return np.eye(Ac.shape[0]) + Ac * dt, Bc * dt


def srb_continuous(params, avg_pitch=0.0):
    """Continuous-time (Ac, Bc) of the planar gravity-augmented SRB model."""
    m, inertia, g = params.mass, params.inertia, params.gravity
    Ac = np.zeros((N_STATE, N_STATE))
    Ac[PX, VX] = Ac[PZ, VZ] = Ac[THETA, OMEGA] = 1.0
    Ac[VZ, GRAV] = -g

    # contact forces are expressed in axes rotated by the horizon-average pitch
    c, s = np.cos(avg_pitch), np.sin(avg_pitch)
    rot = np.array([[c, s], [-s, c]])
    Bc = np.zeros((N_STATE, N_CONTROL))
    for foot in range(2):
        col = 3 * foot
        Bc[VX : VZ + 1, col : col + 2] = rot / m
        Bc[OMEGA, col + 2] = 1.0 / inertia
    return Ac, Bc


def build_srb_lti(params=None, avg_pitch=0.0, dt=0.025, output=(PX, PZ, THETA)):
    params = SrbParams() if params is None else params
    if not dt > 0:
        raise ValueError("dt must be positive")
    Ac, Bc = srb_continuous(params, avg_pitch)
    A, B = discretize_euler(Ac, Bc, dt)
    C = np.zeros((len(output), N_STATE))
    for row, idx in enumerate(output):
        C[row, idx] = 1.0
    return LtiModel(
        A=A, B=B, C=C, dt=dt, augmented=True, srb=params,
        meta={"avg_pitch": float(avg_pitch), "output": tuple(output)},
    )


def rollout_lti(model, x0, controls):
    x = as_vector(x0, "x0", size=model.state_dim)
    controls = np.asarray(controls, dtype=float)
    if controls.size == 0:
        return x[None, :].copy()
    controls = controls.reshape(len(controls), -1)
    if controls.shape[1] != model.control_dim:
        raise DimensionMismatch(
            f"controls have width {controls.shape[1]}, model expects {model.control_dim}"
        )
    out = np.empty((len(controls) + 1, model.state_dim))
    out[0] = x
    for k, u in enumerate(controls):
        out[k + 1] = model.A @ out[k] + model.B @ u
    return out


def spectral_radius(M, max_iter=64, tol=1e-12):
    """Largest eigenvalue modulus via normalized repeated squaring.

    Computes lim ||M^(2^j)||^(1/2^j) while keeping the powered matrix at
    unit norm, so the estimate is unaffected by over- or underflow.
    Nilpotent inputs collapse to the zero matrix and return 0.
    """
    X = as_matrix(M, "M", square=True).copy()
    log_c = 0.0
    prev = None
    settled = 0
    for j in range(max_iter):
        s = np.linalg.norm(X, 2) if X.shape[0] <= 8 else np.linalg.norm(X)
        if s == 0.0 or not np.isfinite(s):
            if s == 0.0:
                return 0.0
            raise NonConvergence("matrix powers became non-finite")
        X = X / s
        log_c += np.log(s) / 2.0**j
        est = float(np.exp(log_c))
        if prev is not None and abs(est - prev) <= tol * max(1.0, est):
            settled += 1
            if settled == 2:
                return est
        else:
            settled = 0
        if est < 1e-300:
            return 0.0
        prev = est
        X = X @ X
    raise NonConvergence(f"spectral radius estimate did not settle in {max_iter} squarings")
