"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion with the measured quantities. The two training
suites (9 and 10) need ``--runslow``; set ``OGMP_ACCEPTANCE_OUT`` to keep
their run directories.
"""
import csv
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from oracle_guided import harness
from oracle_guided.cli import EXIT_OK, main
from oracle_guided.config import load_config, parse_config
from oracle_guided.encoder import LATENT_DIM
from oracle_guided.env import ACTION_DIM, RHO_VIOLATION, EnvConfig, ParkourEnv, check_termination, compute_reward
from oracle_guided.lti import OMEGA, PZ, THETA, VX, VZ, solve_dare
from oracle_guided.metrics import froude
from oracle_guided.nn import backward, forward, gaussian_logp, gaussian_logp_grad, init_mlp, init_policy
from oracle_guided.oracle import FLIGHT, KINDS, ReferenceOracle, step_reference_suite, tracking_cost
from oracle_guided.ppo import PointMassEnv, PpoEstimator, bang_bang_action, evaluate_point_mass
from test_lti import GOLDEN, random_system, riccati_gap
from test_nn import central_difference, rel_err
from test_oracle import random_query

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def criterion(number, name):
    return pytest.mark.criterion(number, name)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def slow_out(tmp_path_factory):
    keep = os.environ.get("OGMP_ACCEPTANCE_OUT")
    return Path(keep) if keep else tmp_path_factory.mktemp("slow")


@criterion(1, "riccati correctness")
def test_riccati(record_property):
    sol = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(sol.P[0, 0] - GOLDEN) < 1e-9
    rng = np.random.default_rng(1)
    worst_gap, worst_radius = 0.0, 0.0
    for _ in range(100):
        A, B, Q, R = random_system(rng, int(rng.integers(1, 7)))
        sol = solve_dare(A, B, Q, R)
        worst_gap = max(worst_gap, riccati_gap(A, B, Q, R, sol.P))
        worst_radius = max(worst_radius, np.max(np.abs(np.linalg.eigvals(A - B @ sol.K))))
    record_property("max_residual", f"{worst_gap:.1e}")
    record_property("max_radius", f"{worst_radius:.4f}")
    assert worst_gap < 1e-8
    assert worst_radius < 1


@criterion(2, "gradient exactness")
def test_gradients(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        sizes = tuple(int(s) for s in rng.integers(1, 10, size=int(rng.integers(2, 5))))
        p = init_mlp(sizes, rng)
        x = rng.normal(size=(4, sizes[0]))
        up = rng.normal(size=(4, sizes[-1]))
        g, _ = backward(p, x, up)
        fd = central_difference(lambda t: np.sum(forward(p.with_flat(t), x) * up), p.flat)
        worst = max(worst, rel_err(g, fd))
    policy = init_policy(26, ACTION_DIM, rng, hidden=(16, 16))
    obs, act, w = rng.normal(size=(6, 26)), rng.normal(size=(6, ACTION_DIM)), rng.normal(size=6)
    g = gaussian_logp_grad(policy, obs, act, w)
    fd = central_difference(lambda t: np.sum(w * gaussian_logp(policy.with_flat(t), obs, act)), policy.flat())
    worst = max(worst, rel_err(g, fd))
    record_property("max_rel_err", f"{worst:.1e}")
    assert worst < 1e-4


@criterion(3, "reward contract")
def test_reward(record_property):
    rng = np.random.default_rng(3)
    n = 10_000
    scale = rng.uniform(0, 3, size=(n, 1))
    x, ref = rng.normal(size=(n, 7)) * scale, rng.normal(size=(n, 7)) * scale
    r, _, _ = compute_reward(x, ref, rng.uniform(-1, 1, size=(n, ACTION_DIM)), rng.random(n) < 0.5)
    record_property("range", f"[{r.min():.3f}, {r.max():.3f}]")
    assert np.all(r > -0.3) and np.all(r <= 1.0)
    s = np.array([[1.0, 0.55, 0.0, 0.5, 0.0, 0.0, 1.0]])
    zero = np.zeros((1, ACTION_DIM))
    assert abs(compute_reward(s, s, zero, [False])[0][0] - 1.0) <= 1e-12
    assert abs(compute_reward(s, s, zero, [True])[0][0] - 0.7) <= 1e-12
    far = s + np.array([[1e3, 1e3, 1e3, 0, 0, 0, 0]])
    assert 0.0 < compute_reward(far, s, np.full((1, ACTION_DIM), 1e4), [False])[0][0] < 1e-12


@criterion(4, "termination semantics")
def test_termination(record_property):
    rng = np.random.default_rng(4)
    n = 10_000
    x, ref = rng.normal(size=(n, 7)) * 0.5, rng.normal(size=(n, 7)) * 0.5
    W = rng.uniform(0, 2, size=6)
    rhos = np.sort(rng.uniform(0.01, 3.0, size=16))
    hits = [check_termination(x, ref, W, rho, 0, 400, np.ones(n)) == RHO_VIOLATION for rho in rhos]
    for small, large in zip(hits[:-1], hits[1:]):
        assert np.all(small | ~large)
    env = ParkourEnv(EnvConfig(rho=1e10), n_envs=16, seed=4, auto_reset=True)
    env.reset()
    codes = np.concatenate([env.step(rng.uniform(-1, 1, size=(16, ACTION_DIM))).termination
                            for _ in range(800)])
    record_property("unguided_steps", codes.size)
    assert not np.any(codes == RHO_VIOLATION)


@criterion(5, "oracle existence and flight physics")
def test_oracle_flight(record_property):
    g, dt = 9.81, 0.025
    flights = 0
    for kind in KINDS:
        rng = np.random.default_rng(5)
        oracles = {h: ReferenceOracle(kind).fit(horizon=h) for h in (7, 20, 30, 40)}
        for _ in range(1000):
            q = random_query(rng, horizon=int(rng.choice(list(oracles))))
            ref = oracles[q.horizon].predict(q)
            assert ref.states.shape == (q.horizon + 1, 7) and np.all(np.isfinite(ref.states))
            for phase, s, e in ref.phase_ranges():
                if phase != FLIGHT:
                    continue
                flights += 1
                seg = ref.states[s : e + 1]
                t = np.arange(len(seg)) * dt
                assert np.all(seg[:, VX] == seg[0, VX]) and np.all(seg[:, OMEGA] == seg[0, OMEGA])
                assert np.allclose(seg[:, VZ], seg[0, VZ] - g * t, atol=1e-9)
                closed = seg[0, PZ] + seg[0, VZ] * t - 0.5 * g * t**2
                assert np.all(np.abs(seg[:, PZ] - closed) <= 0.5 * g * dt * t + 1e-9)
                assert np.allclose(seg[:, THETA], seg[0, THETA] + seg[0, OMEGA] * t, atol=1e-9)
    record_property("flight_segments", flights)
    assert flights > 100


@criterion(6, "preview superiority")
def test_preview_margin(record_property):
    suite = step_reference_suite(horizon=30)
    cost = {k: sum(tracking_cost(ReferenceOracle(k).fit(horizon=30), q) for q in suite) for k in KINDS}
    record_property("prev/lqr", f"{cost['prev'] / cost['lqr']:.3f}")
    record_property("lqr/li", f"{cost['lqr'] / cost['li']:.3f}")
    assert cost["prev"] <= 0.95 * cost["lqr"]
    assert cost["lqr"] <= 0.95 * cost["li"]


@criterion(7, "froude identity")
def test_froude(tiny_config, record_property):
    cfg = load_config(tiny_config)
    rows = read_csv(harness.run_experiment(cfg) / "report.csv")
    g, ll = cfg.physics.gravity, cfg.physics.leg_length
    for row in rows:
        mhs, mf = float(row["MHS"]), float(row["MF"])
        assert abs(mf - mhs**2 / (g * ll)) <= 1e-12 * max(1.0, mf)
    table = froude(1.77, 9.81, 0.4435)
    record_property("MF(1.77, 0.4435)", f"{table:.4f}")
    assert table == pytest.approx(0.72, abs=5e-3)


@criterion(8, "ppo calibration")
def test_ppo_calibration(record_property):
    best = evaluate_point_mass(bang_bang_action)
    ratios = []
    for seed in range(3):
        est = PpoEstimator(total_steps=200_000, seed=seed).fit(PointMassEnv(n_envs=16, seed=seed))
        ratios.append(evaluate_point_mass(est.predict) / best)
    record_property("return/bang_bang", ", ".join(f"{r:.3f}" for r in ratios))
    assert min(ratios) >= 0.9


@criterion(9, "rho sweep")
@pytest.mark.slow
def test_rho_sweep(slow_out, record_property):
    cfg = load_config(CONFIGS / "rho_sweep.yaml")
    _, pivot = harness.sweep(cfg, "rho", cfg.sweep.values, cfg.seeds, slow_out / "rho_sweep")
    J = {float(p["value"]): p["J_true_mean"] for p in pivot}
    assert all(p["n_failed"] == 0 for p in pivot)
    record_property("J_T", ", ".join(f"{v:g}:{j:.3f}" for v, j in J.items()))
    baseline = max(J[0.05], J[1e10])
    for rho in (0.3, 0.5):
        assert J[rho] >= 1.2 * baseline, f"rho={rho}: {J[rho]:.3f} vs {baseline:.3f}"


@criterion(10, "horizon ablation")
@pytest.mark.slow
def test_horizon_ablation(slow_out, record_property):
    cfg = load_config(CONFIGS / "horizon_ablation.yaml")
    _, pivot = harness.sweep(cfg, "horizon", cfg.sweep.values, cfg.seeds, slow_out / "horizon_ablation")
    by = {int(float(p["value"])): p for p in pivot}
    short, long = by[7], by[30]
    record_property("J_T", f"7:{short['J_true_mean']:.3f}, 30:{long['J_true_mean']:.3f}")
    record_property("J_tilde", f"7:{short['J_tilde_mean']:.2f}, 30:{long['J_tilde_mean']:.2f}")
    assert long["J_true_mean"] >= 1.5 * short["J_true_mean"]
    assert short["J_tilde_mean"] >= long["J_tilde_mean"] - 0.2 * abs(long["J_tilde_mean"])


@criterion(11, "encoder quality")
def test_encoder_quality(record_property):
    cfg = parse_config("seeds: [0]\noutput_dir: unused\n")
    dataset = harness.build_dataset(cfg, 0)
    _, diag, z = harness.fit_encoder(cfg, dataset, 0)
    record_property("heldout_rmse", f"{diag['heldout_rmse']:.4f}")
    record_property("separation", f"{diag['separation']:.2f}")
    assert z.shape == (len(dataset), 2) and LATENT_DIM == 2
    assert diag["heldout_rmse"] < 0.15
    assert diag["separation"] > 2


def cli_session(config, root):
    """Argument lists running every subcommand once, writing only under ``root``."""
    ckpt = root / "train" / "tiny_seed0" / "seed_0" / "checkpoint.bin"
    steps = [
        ("train", "--config", config, "--out", root / "train", "--quiet"),
        ("gen-dataset", "--config", config, "--out", root / "data" / "data.csv", "--n-per-mode", 8),
        ("train-encoder", "--config", config, "--dataset", root / "data" / "data.csv", "--out", root / "enc"),
        ("oracle-viz", "--config", config, "--mode", "leap", "--out", root / "viz.csv"),
        ("sweep", "--config", config, "--values", "0.5,1e10", "--out", root / "sweep"),
        ("eval", "--config", config, "--checkpoint", ckpt, "--out", root / "eval"),
        ("versatility-grid", "--config", config, "--checkpoint", ckpt, "--out", root / "grid.csv"),
    ]
    return [[str(a) for a in step] for step in steps]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(12, "determinism")
def test_cli_rerun_is_bit_identical(tiny_config, tmp_path, capsys, record_property):
    root = tmp_path / "session"
    outputs = []
    for _ in range(2):
        if root.exists():
            shutil.move(root, tmp_path / "first")
        printed = []
        for argv in cli_session(tiny_config, root):
            assert main(argv) == EXIT_OK, argv[0]
            printed.append(capsys.readouterr().out)
        outputs.append((tree(root), printed))
    (files_a, out_a), (files_b, out_b) = outputs
    record_property("files", len(files_a))
    assert any(name.endswith("manifest.json") for name in files_a)
    assert sorted(files_a) == sorted(files_b)
    assert [n for n in files_a if files_a[n] != files_b[n]] == []
    assert out_a == out_b
