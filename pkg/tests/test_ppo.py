import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracle_guided.env import FALL, NONE, RHO_VIOLATION, TIME_LIMIT
from oracle_guided.exceptions import LengthMismatch
from oracle_guided.ppo import (
    Agent,
    PointMassEnv,
    PpoConfig,
    PpoEstimator,
    RunningNorm,
    bang_bang_action,
    collect_rollouts,
    compute_gae,
    episode_summary,
    evaluate_point_mass,
    ppo_loss,
    train,
)


def gae_reference(r, v, boot, terms, final, gamma, lam):
    """Direct sum of discounted TD errors along each episode segment."""
    T = len(r)
    delta = np.empty(T)
    for t in range(T):
        if terms[t] == TIME_LIMIT:
            nxt = final[t]
        elif terms[t] != NONE:
            nxt = 0.0
        else:
            nxt = boot if t == T - 1 else v[t + 1]
        delta[t] = r[t] + gamma * nxt - v[t]
    adv = np.zeros(T)
    for t in range(T):
        for l in range(T - t):
            adv[t] += (gamma * lam) ** l * delta[t + l]
            if terms[t + l] != NONE:
                break
    return adv


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25),
       st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_direct_sum(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v, final = rng.normal(size=T), rng.normal(size=T), rng.normal(size=T)
    terms = rng.choice([NONE, NONE, NONE, RHO_VIOLATION, FALL, TIME_LIMIT], size=T)
    boot = rng.normal()
    adv, ret = compute_gae(r, v, boot, terms, gamma, lam, final)
    assert np.allclose(adv, gae_reference(r, v, boot, terms, final, gamma, lam), atol=1e-10)
    assert np.allclose(ret, adv + v)


def test_gae_batched_and_lambda_one():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(6, 3))
    v = rng.normal(size=(6, 3))
    terms = np.full((6, 3), NONE)
    adv, ret = compute_gae(r, v, np.zeros(3), terms, 0.9, 1.0)
    discounted = np.array([sum(0.9**l * r[t + l] for l in range(6 - t)) for t in range(6)])
    assert np.allclose(ret, discounted)
    with pytest.raises(LengthMismatch):
        compute_gae(r, v[:5], 0.0, terms, 0.9, 0.9)


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(1)
    chunks = [rng.normal(3.0, 2.0, size=(n, 4)) for n in (5, 17, 64)]
    norm = RunningNorm(4)
    for c in chunks:
        norm.update(c)
    allx = np.concatenate(chunks)
    assert np.allclose(norm.mean, allx.mean(axis=0), atol=1e-4)
    assert np.allclose(norm.var, allx.var(axis=0), rtol=1e-4)
    assert np.all(np.abs(norm(allx * 1e6)) <= norm.clip)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    agent = Agent.create(5, 3, rng, hidden=(8,), log_std=-0.4)
    agent.set_flat(agent.flat() + 0.1 * rng.normal(size=agent.flat().size))
    n = 32
    obs = rng.normal(size=(n, 5))
    mb = {"obs": obs, "actions": rng.normal(size=(n, 3)),
          "adv": rng.normal(size=n), "returns": rng.normal(size=n)}
    mb["logps"] = agent.act(obs, rng)[1] + rng.normal(0, 0.3, size=n)
    cfg = PpoConfig(clip=0.2, vf_coef=0.7, ent_coef=0.01)
    _, grad, _ = ppo_loss(mb, agent, cfg)
    theta = agent.flat().copy()
    fd = np.zeros_like(theta)
    probe = copy.deepcopy(agent)
    for i in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[i] += sign * 1e-6
            probe.set_flat(t)
            fd[i] += sign * ppo_loss(mb, probe, cfg)[0]
    fd /= 2e-6
    assert np.linalg.norm(grad - fd) / (np.linalg.norm(grad) + np.linalg.norm(fd)) < 1e-4


def test_rollout_shapes_and_episode_bookkeeping():
    env = PointMassEnv(n_envs=4, seed=0, limit=10)
    agent = Agent.create(2, 1, np.random.default_rng(0), hidden=(8,))
    batch, obs = collect_rollouts(env, agent, 25, np.random.default_rng(1))
    assert batch.obs.shape == (25, 4, 2) and batch.actions.shape == (25, 4, 1)
    assert batch.size == 100
    assert len(batch.episodes) == 8
    assert np.count_nonzero(batch.terminations == TIME_LIMIT) == 8
    assert obs.shape == (4, 2)


def test_training_is_deterministic_and_improves(tmp_path):
    cfg = PpoConfig(total_steps=20_000, n_envs=8, steps_per_env=64, lr=1e-3, hidden=(32, 32))
    a1, rows1 = train(PointMassEnv(n_envs=8, seed=3), cfg, seed=3, out_dir=tmp_path)
    a2, rows2 = train(PointMassEnv(n_envs=8, seed=3), cfg, seed=3)
    assert np.array_equal(a1.flat(), a2.flat())
    assert repr(rows1) == repr(rows2)
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0].startswith("iter,steps")
    loaded, meta = Agent.load(tmp_path / "checkpoint.bin")
    assert meta["seed"] == 3
    obs = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(loaded.act(obs, deterministic=True)[0], a1.act(obs, deterministic=True)[0])
    before = evaluate_point_mass(lambda o: np.zeros((len(o), 1)))
    after = evaluate_point_mass(lambda o: a1.act(o, deterministic=True)[0])
    assert after > before


def test_estimator_api():
    est = PpoEstimator(total_steps=2000, steps_per_env=32, epochs=1, hidden=(8,))
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 2)))
    est.fit(PointMassEnv(n_envs=4))
    assert est.predict(np.zeros((3, 2))).shape == (3, 1)
    assert len(est.history_) == 16
    assert est.config(4).n_envs == 4


def test_bang_bang_is_a_strong_reference():
    best = evaluate_point_mass(bang_bang_action)
    idle = evaluate_point_mass(lambda o: np.zeros((len(o), 1)))
    assert best > 40 and best > 2 * idle


def test_episode_summary():
    eps = [{"return": 1.0, "termination": "fall", "j_true": 2.0, "j_tilde": -1.0},
           {"return": 3.0, "termination": "time_limit", "j_true": 4.0, "j_tilde": -3.0}]
    s = episode_summary(eps)
    assert s["mean_return"] == 2.0 and s["J_true"] == 3.0 and s["fall_frac"] == 0.5
    assert np.isnan(episode_summary([])["mean_return"])


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(minibatch=0)
    with pytest.raises(ValueError):
        PpoConfig(lr=0.0)
