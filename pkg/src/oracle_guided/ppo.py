"""Clipped-surrogate PPO with GAE, aware of the three termination kinds.

``rho_violation`` and ``fall`` are true terminals (no bootstrap);
``time_limit`` bootstraps from the value of the final observation.
"""

from dataclasses import dataclass, field
import csv
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import IoFailure, LengthMismatch, NaNDetected
from .nn import (
    AdamState, adam_update, backward, forward, forward_cache, gaussian_entropy,
    gaussian_logp, gaussian_logp_grad, init_mlp, init_policy, mlp_arrays,
    mlp_from_arrays, sample, save_checkpoint, load_checkpoint, GaussianPolicy,
)

# termination codes shared with the environments
NONE, RHO_VIOLATION, FALL, TIME_LIMIT = range(4)
TERMINATIONS = ("none", "rho_violation", "fall", "time_limit")

METRIC_COLUMNS = (
    "iter", "steps", "mean_return", "J_tilde", "J_true", "rho_term_frac", "fall_frac",
    "timeout_frac", "clip_frac", "entropy",
)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    lr: float = 3e-4
    total_steps: int = 200_000
    n_envs: int = 16
    steps_per_env: int = 128
    hidden: tuple = (64, 64)
    log_std_init: float = -0.5
    max_grad_norm: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        for name in ("epochs", "minibatch", "n_envs", "steps_per_env"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0 or self.lr <= 0:
            raise ValueError("total_steps must be >= 0 and lr > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def compute_gae(rewards, values, bootstrap_value, terminations, gamma, lam, final_values=None):
    """Advantages and returns over a (T,) or (T, N) rollout.

    ``bootstrap_value`` is V of the observation after the last step;
    ``final_values[t]`` is V of the terminal observation of an episode that
    hit the time limit at step t (defaults to ``bootstrap_value`` when the
    cut happens on the last step and 0 otherwise).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    terms = np.asarray(terminations)
    if not (rewards.shape == values.shape == terms.shape):
        raise LengthMismatch(
            f"rewards {rewards.shape}, values {values.shape}, terminations {terms.shape} differ"
        )
    T = len(rewards)
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=float), rewards.shape[1:])
    if final_values is None:
        final_values = np.zeros_like(rewards)
        if T:
            final_values[-1] = boot
    final_values = np.asarray(final_values, dtype=float)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        ended = terms[t] != NONE
        nxt = boot if t == T - 1 else values[t + 1]
        nxt = np.where(terms[t] == TIME_LIMIT, final_values[t], np.where(ended, 0.0, nxt))
        delta = rewards[t] + gamma * nxt - values[t]
        last = delta + gamma * lam * np.where(ended, 0.0, last)
        adv[t] = last
    return adv, adv + values


class RunningNorm:
    """Per-feature running mean/variance (parallel Welford merge)."""

    def __init__(self, dim, clip=10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip

    def update(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, len(self.mean))
        b_mean, b_var, b_n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = b_mean - self.mean
        total = self.count + b_n
        self.mean = self.mean + delta * b_n / total
        m2 = self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x):
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


@dataclass
class Agent:
    """Policy, value network and observation normalizer."""

    policy: GaussianPolicy
    value: object
    norm: RunningNorm

    @classmethod
    def create(cls, obs_dim, act_dim, rng, hidden=(64, 64), log_std=-0.5):
        policy = init_policy(obs_dim, act_dim, rng, hidden, log_std)
        value = init_mlp((obs_dim, *hidden, 1), rng)
        return cls(policy, value, RunningNorm(obs_dim))

    def act(self, obs, rng=None, deterministic=False):
        o = self.norm(obs)
        if deterministic:
            mu = forward(self.policy.mean, o)
            return mu, gaussian_logp(self.policy, o, mu, mu)
        return sample(self.policy, o, rng)

    def values(self, obs):
        return forward(self.value, self.norm(obs))[..., 0]

    def flat(self):
        return np.concatenate([self.policy.flat(), self.value.flat])

    def set_flat(self, flat):
        n = self.policy.flat().size
        self.policy = self.policy.with_flat(flat[:n])
        self.value = self.value.with_flat(flat[n:])

    def arrays(self):
        out = {"policy.log_std": self.policy.log_std}
        out.update(mlp_arrays("policy.mean", self.policy.mean))
        out.update(mlp_arrays("value", self.value))
        out.update({"norm.mean": self.norm.mean, "norm.var": self.norm.var,
                    "norm.count": np.array([self.norm.count])})
        return out

    @classmethod
    def from_arrays(cls, arrays):
        mean = mlp_from_arrays("policy.mean", arrays)
        norm = RunningNorm(mean.sizes[0])
        norm.mean, norm.var = arrays["norm.mean"].copy(), arrays["norm.var"].copy()
        norm.count = float(arrays["norm.count"][0])
        return cls(GaussianPolicy(mean, arrays["policy.log_std"]),
                   mlp_from_arrays("value", arrays), norm)

    def save(self, path, meta=None):
        return save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        return cls.from_arrays(arrays), meta


@dataclass
class RolloutBatch:
    obs: np.ndarray            # (T, N, D) normalized observations
    actions: np.ndarray        # (T, N, A)
    logps: np.ndarray          # (T, N)
    rewards: np.ndarray        # (T, N)
    values: np.ndarray         # (T, N)
    terminations: np.ndarray   # (T, N) codes
    final_values: np.ndarray   # (T, N) value of the terminal obs on time-limit cuts
    bootstrap: np.ndarray      # (N,)
    episodes: list = field(default_factory=list)

    @property
    def size(self):
        return self.rewards.size


def collect_rollouts(env, agent, steps_per_env, rng, obs=None, update_norm=True):
    """Roll ``env`` (auto-resetting, batched) forward ``steps_per_env`` steps.

    Returns the batch and the observation to continue from.
    """
    obs = env.reset() if obs is None else obs
    n = env.n_envs
    T = steps_per_env
    D = obs.shape[-1]
    out_obs = np.empty((T, n, D))
    actions = np.empty((T, n, env.act_dim))
    logps = np.empty((T, n))
    rewards = np.empty((T, n))
    values = np.empty((T, n))
    terms = np.empty((T, n), dtype=int)
    final_values = np.zeros((T, n))
    first_episode = len(env.episodes)
    for t in range(T):
        if update_norm:
            agent.norm.update(obs)
        o = agent.norm(obs)
        out_obs[t] = o
        a, lp = sample(agent.policy, o, rng)
        values[t] = forward(agent.value, o)[:, 0]
        res = env.step(a)
        actions[t] = a
        logps[t] = lp
        rewards[t] = res.reward
        terms[t] = res.termination
        cut = res.termination == TIME_LIMIT
        if np.any(cut):
            final_values[t, cut] = agent.values(res.info["final_obs"][cut])
        obs = res.observation
    bootstrap = agent.values(obs)
    batch = RolloutBatch(out_obs, actions, logps, rewards, values, terms, final_values,
                         bootstrap, env.episodes[first_episode:])
    return batch, obs


def ppo_loss(mb, agent, cfg):
    """Loss, flat gradient (policy then value) and statistics for a minibatch.

    ``mb`` holds obs (normalized), actions, logps (old), adv (normalized)
    and returns.
    """
    policy, value = agent.policy, agent.value
    n = len(mb["adv"])
    mu, cache = forward_cache(policy.mean, mb["obs"])
    logp = gaussian_logp(policy, mb["obs"], mb["actions"], mu)
    log_ratio = logp - mb["logps"]
    ratio = np.exp(log_ratio)
    adv = mb["adv"]
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    v, v_cache = forward_cache(value, mb["obs"])
    v = v[:, 0]
    entropy = gaussian_entropy(policy)
    pg_loss = -surr.mean()
    v_loss = np.mean((v - mb["returns"]) ** 2)
    loss = pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * entropy

    active = ratio * adv <= clipped * adv
    d_logp = np.where(active, -ratio * adv / n, 0.0)
    g_pol = gaussian_logp_grad(policy, mb["obs"], mb["actions"], d_logp)
    g_pol[-policy.act_dim:] -= cfg.ent_coef
    g_val, _ = backward(value, mb["obs"], (cfg.vf_coef * 2.0 * (v - mb["returns"]) / n)[:, None], v_cache)
    grad = np.concatenate([g_pol, g_val])

    stats = {
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "pg_loss": float(pg_loss),
        "v_loss": float(v_loss),
    }
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NaNDetected("non-finite PPO loss or gradient", {**stats, "loss": float(loss)})
    return float(loss), grad, stats


def ppo_update(agent, batch, cfg, adam, rng):
    adv, ret = compute_gae(batch.rewards, batch.values, batch.bootstrap, batch.terminations,
                           cfg.gamma, cfg.lam, batch.final_values)
    N = batch.size
    flat = lambda a: a.reshape(N, *a.shape[2:])
    data = {
        "obs": flat(batch.obs), "actions": flat(batch.actions), "logps": flat(batch.logps),
        "adv": flat(adv), "returns": flat(ret),
    }
    stats = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for lo in range(0, N, cfg.minibatch):
            idx = perm[lo : lo + cfg.minibatch]
            mb = {k: v[idx] for k, v in data.items()}
            a = mb["adv"]
            mb["adv"] = (a - a.mean()) / max(a.std(), 1e-8)
            _, grad, st = ppo_loss(mb, agent, cfg)
            norm = np.linalg.norm(grad)
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / norm)
            params, adam = adam_update(adam, agent.flat(), grad)
            agent.set_flat(params)
            stats.append(st)
    summary = {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}
    return adam, summary


def episode_summary(episodes):
    if not episodes:
        nan = float("nan")
        return {"mean_return": nan, "J_tilde": nan, "J_true": nan, "rho_term_frac": nan,
                "fall_frac": nan, "timeout_frac": nan}
    kinds = [e["termination"] for e in episodes]
    n = len(episodes)
    return {
        "mean_return": float(np.mean([e["return"] for e in episodes])),
        "J_tilde": float(np.mean([e.get("j_tilde", float("nan")) for e in episodes])),
        "J_true": float(np.mean([e.get("j_true", float("nan")) for e in episodes])),
        "rho_term_frac": kinds.count("rho_violation") / n,
        "fall_frac": kinds.count("fall") / n,
        "timeout_frac": kinds.count("time_limit") / n,
    }


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_metrics(path, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    except OSError as exc:
        raise IoFailure(f"cannot write metrics {path}: {exc}") from exc


def train(env, cfg, seed=0, out_dir=None, agent=None, callback=None):
    """Run PPO on a batched auto-resetting ``env``.

    Returns (agent, metrics rows). With ``out_dir`` the metrics CSV and the
    final checkpoint (plus periodic ones) are written there.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    if agent is None:
        agent = Agent.create(env.obs_dim, env.act_dim, np.random.default_rng([seed, 1]),
                             cfg.hidden, cfg.log_std_init)
    adam = AdamState.zeros(agent.flat().size, lr=cfg.lr)
    per_iter = cfg.steps_per_env * env.n_envs
    n_iters = max(1, math.ceil(cfg.total_steps / per_iter))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {out}: {exc}") from exc
    rows = []
    obs = None
    steps = 0
    for it in range(n_iters):
        batch, obs = collect_rollouts(env, agent, cfg.steps_per_env, rng, obs)
        steps += batch.size
        adam, st = ppo_update(agent, batch, cfg, adam, rng)
        row = {"iter": it, "steps": steps, **episode_summary(batch.episodes),
               "clip_frac": st["clip_frac"], "entropy": st["entropy"]}
        rows.append(row)
        if callback is not None:
            callback(row, agent)
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            agent.save(out / f"checkpoint_{it + 1:05d}.bin", {"iter": it + 1, "steps": steps})
    if out is not None:
        write_metrics(out / "metrics.csv", rows)
        agent.save(out / "checkpoint.bin", {"iter": n_iters, "steps": steps, "seed": seed})
    return agent, rows


class PpoEstimator(BaseEstimator):
    """Estimator face of ``train``: ``fit(env)`` learns, ``predict(obs)``
    returns mean actions. Hyperparameters mirror ``PpoConfig``."""

    def __init__(self, gamma=0.99, lam=0.95, clip=0.2, epochs=4, minibatch=256, vf_coef=0.5,
                 ent_coef=0.0, lr=3e-4, total_steps=200_000, steps_per_env=128,
                 hidden=(64, 64), log_std_init=-0.5, max_grad_norm=0.5, seed=0):
        self.gamma = gamma
        self.lam = lam
        self.clip = clip
        self.epochs = epochs
        self.minibatch = minibatch
        self.vf_coef = vf_coef
        self.ent_coef = ent_coef
        self.lr = lr
        self.total_steps = total_steps
        self.steps_per_env = steps_per_env
        self.hidden = hidden
        self.log_std_init = log_std_init
        self.max_grad_norm = max_grad_norm
        self.seed = seed

    def config(self, n_envs):
        params = self.get_params()
        params.pop("seed")
        return PpoConfig(n_envs=n_envs, **params)

    def fit(self, env, y=None, callback=None):
        self.agent_, self.history_ = train(env, self.config(env.n_envs), seed=self.seed,
                                           callback=callback)
        return self

    def predict(self, obs):
        check_is_fitted(self, "agent_")
        return self.agent_.act(np.asarray(obs, dtype=float), deterministic=True)[0]

    def sample(self, obs, rng):
        check_is_fitted(self, "agent_")
        return self.agent_.act(np.asarray(obs, dtype=float), rng)[0]


# -- calibration task ------------------------------------------------------------


@dataclass
class _Result:
    observation: np.ndarray
    reward: np.ndarray
    termination: np.ndarray
    info: dict


class PointMassEnv:
    """1-D double integrator that must reach and hold the origin.

    Observation (error, velocity); action is a force in [-1, 1] scaled to
    ``a_max``; reward exp(-2|error|); episodes end at the time limit.
    """

    act_dim = 1
    obs_dim = 2

    def __init__(self, n_envs=1, seed=0, limit=50, dt=0.1, a_max=2.0, auto_reset=True):
        self.n_envs = n_envs
        self.limit = limit
        self.dt = dt
        self.a_max = a_max
        self.auto_reset = auto_reset
        self._rng = np.random.default_rng([seed, 7])
        self.episodes = []

    def _draw(self, n):
        return np.column_stack([self._rng.uniform(-1.5, 1.5, n), self._rng.uniform(-0.5, 0.5, n)])

    def reset(self, states=None):
        self.x = self._draw(self.n_envs) if states is None else np.array(states, dtype=float)
        self.t = np.zeros(self.n_envs, int)
        self.ret = np.zeros(self.n_envs)
        return self.x.copy()

    def step(self, action):
        u = np.clip(np.asarray(action, dtype=float).reshape(self.n_envs), -1.0, 1.0)
        self.x[:, 1] += u * self.a_max * self.dt
        self.x[:, 0] += self.x[:, 1] * self.dt
        r = np.exp(-2.0 * np.abs(self.x[:, 0]))
        self.t += 1
        self.ret += r
        term = np.where(self.t >= self.limit, TIME_LIMIT, NONE)
        final = self.x.copy()
        done = np.flatnonzero(term != NONE)
        for i in done:
            self.episodes.append({"return": float(self.ret[i]), "termination": "time_limit",
                                  "length": int(self.t[i])})
        if self.auto_reset and len(done):
            self.x[done] = self._draw(len(done))
            self.t[done] = 0
            self.ret[done] = 0.0
        return _Result(self.x.copy(), r, term, {"final_obs": final})


def bang_bang_action(obs, a_max=2.0):
    """Time-optimal switching law for the double integrator."""
    e, v = obs[..., 0], obs[..., 1]
    s = e + v * np.abs(v) / (2.0 * a_max)
    return -np.sign(s)[..., None]


def evaluate_point_mass(act, n_episodes=64, seed=123, **env_kw):
    """Mean return of ``act(obs) -> action`` on a fixed set of start states."""
    env = PointMassEnv(n_envs=n_episodes, seed=seed, auto_reset=False, **env_kw)
    obs = env.reset()
    total = np.zeros(n_episodes)
    for _ in range(env.limit):
        res = env.step(act(obs))
        total += res.reward
        obs = res.observation
    return float(total.mean())
