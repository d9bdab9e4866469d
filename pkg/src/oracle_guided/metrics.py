"""Per-episode performance metrics and their sample-mean report."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import EmptyInput

REPORT_COLUMNS = ("MHA_g", "MHS", "MF", "EL", "mean_return", "J_tilde", "J_true", "n_episodes")


@dataclass(frozen=True)
class MetricsReport:
    MHA_g: float        # max heading acceleration, multiples of g
    MHS: float          # max heading speed, m/s
    MF: float           # Froude number MHS^2 / (g * leg_length)
    EL: float           # fraction of the step limit survived
    mean_return: float
    J_tilde: float
    J_true: float
    n_episodes: int

    def as_dict(self):
        return asdict(self)


def froude(speed, gravity, leg_length):
    return speed**2 / (gravity * leg_length)


def trace_extrema(vx, dt):
    """(max v_x, max |dv_x/dt|) of one episode's heading-velocity trace."""
    vx = np.asarray(vx, dtype=float)
    if vx.size == 0:
        return 0.0, 0.0
    acc = np.abs(np.diff(vx)) / dt if vx.size > 1 else np.zeros(1)
    return float(max(vx.max(), 0.0)), float(acc.max(initial=0.0))


def compute_metrics(episodes, gravity=9.81, leg_length=0.44, limit=400):
    """Sample means over episodes.

    Each episode is a mapping with ``max_speed``, ``max_accel`` (m/s^2),
    ``length``, ``return``, ``j_tilde`` and ``j_true``. The Froude number is
    taken from the reported mean heading speed so the identity
    MF = MHS^2 / (g * ll) holds exactly.
    """
    episodes = list(episodes)
    if not episodes:
        raise EmptyInput("no episodes to summarize")
    if not (gravity > 0 and leg_length > 0 and limit > 0):
        raise ValueError("gravity, leg_length and limit must be positive")

    def mean(key):
        return float(np.mean([float(e[key]) for e in episodes]))

    mhs = mean("max_speed")
    el = float(np.mean([min(int(e["length"]), limit) / limit for e in episodes]))
    return MetricsReport(
        MHA_g=mean("max_accel") / gravity,
        MHS=mhs,
        MF=froude(mhs, gravity, leg_length),
        EL=el,
        mean_return=mean("return"),
        J_tilde=mean("j_tilde"),
        J_true=mean("j_true"),
        n_episodes=len(episodes),
    )


def report_is_consistent(report, gravity, leg_length, tol=1e-12):
    return math.isclose(report.MF, froude(report.MHS, gravity, leg_length), rel_tol=tol, abs_tol=tol)
