"""Experiment orchestration: datasets, encoders, training, evaluation,
sweeps and the versatility grid, all written as CSV plus hash manifests."""

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import dump_resolved
from .dataset import generate_mode_dataset, latent_csv, write_dataset
from .encoder import ModeEncoder, cluster_separation
from .env import ACTION_DIM, TERMINATIONS, ParkourEnv
from .exceptions import ConfigError, EmptyInput, IoFailure, OracleGuidedError
from .lti import PX, PZ, THETA, VX, VZ, OMEGA
from .metrics import REPORT_COLUMNS, compute_metrics
from .nn import load_checkpoint, save_checkpoint
from .oracle import OracleKind, OracleQuery, REFERENCE_COLUMNS, ReferenceOracle, reference_rows
from .ppo import Agent, train, write_metrics
from .terrain import ModeSpec, TerrainWindow, single_obstacle_track

EPISODE_COLUMNS = ("episode", "env", "track_seed", "return", "length", "termination",
                   "j_tilde", "j_true", "max_speed", "max_accel")
TRACE_COLUMNS = ("step", "p_x", "p_z", "theta", "v_x", "v_z", "omega",
                 *(f"a{i}" for i in range(ACTION_DIM)),
                 "reward", "r_track", "r_regulation", "termination", "mode")
SWEEP_COLUMNS = ("axis", "value", "seed", "status", "J_tilde", "J_true", "mean_return", "EL", "error")
PIVOT_COLUMNS = ("value", "n_ok", "n_failed", "J_true_mean", "J_true_std", "J_tilde_mean", "J_tilde_std")
GRID_COLUMNS = ("kind", "w", "size", "in_training_box", "mean_return", "episodes",
                "box_w_lo", "box_w_hi", "box_size_lo", "box_size_hi")


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (tuple, list)):
        return "+".join(str(x) for x in v)
    return str(v)


def csv_text(columns, rows):
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root):
    """manifest.json listing every file under ``root`` with its sha256."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    entries = {str(p.relative_to(root)): sha256_file(p) for p in files}
    write_text(root / "manifest.json", json.dumps({"artifacts": entries}, indent=2, sort_keys=True) + "\n")
    return entries


# -- building blocks -----------------------------------------------------------

def make_oracle(cfg, horizon=None):
    ph, ok = cfg.physics, cfg.oracle
    return ReferenceOracle(
        kind=ok.kind, dt=ph.dt, mass=ph.mass, inertia=ph.inertia, gravity=ph.gravity,
        leg_length=ph.leg_length, nominal_height=ph.nominal_height,
        q_state=ok.q_state, r_control=ok.r_control, q_error=ok.q_error,
        q_increment=ok.q_increment, preview_steps=ok.preview_steps,
    ).fit(horizon=cfg.horizon if horizon is None else horizon)


def build_dataset(cfg, seed):
    return generate_mode_dataset(make_oracle(cfg), cfg.ranges, n_per_mode=cfg.encoder.n_per_mode,
                                 horizon=cfg.horizon, seed=seed)


def fit_encoder(cfg, dataset, seed):
    """Train on the stratified training split; returns (encoder, diagnostics)."""
    e = cfg.encoder
    train_idx, test_idx = dataset.split(e.holdout, seed)
    enc = ModeEncoder(hidden=e.hidden, epochs=e.epochs, lr=e.lr, batch_size=e.batch_size,
                      seed=seed, dt=cfg.physics.dt).fit(dataset.states[train_idx])
    held = test_idx if len(test_idx) else train_idx
    labels = np.asarray(dataset.labels)
    z = enc.transform(dataset.states)
    diag = {
        "train_rmse": enc.reconstruction_rmse(dataset.states[train_idx]),
        "heldout_rmse": enc.reconstruction_rmse(dataset.states[held]),
        "separation": cluster_separation(z[held], labels[held]),
        "final_loss": enc.loss_curve_[-1] if enc.loss_curve_ else float("nan"),
    }
    return enc, diag, z


def save_policy(path, agent, encoder=None, meta=None):
    arrays = dict(agent.arrays())
    if encoder is not None:
        arrays.update({f"encoder.{k}": v for k, v in encoder.arrays().items()})
    return save_checkpoint(path, arrays, meta)


def load_policy(path):
    """(agent, encoder or None, meta) from a policy checkpoint."""
    arrays, meta = load_checkpoint(path)
    enc_arrays = {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
    encoder = ModeEncoder.from_arrays(enc_arrays) if enc_arrays else None
    return Agent.from_arrays(arrays), encoder, meta


def check_compatible(agent, env_cfg):
    if agent.policy.obs_dim != env_cfg.obs_dim:
        raise ConfigError(
            f"checkpoint expects {agent.policy.obs_dim} observations, config gives {env_cfg.obs_dim}",
            "track.frame_stack",
        )


def train_policy(cfg, seed, out_dir=None, encoder=None, callback=None):
    env_cfg = cfg.env_config()
    env = ParkourEnv(env_cfg, n_envs=cfg.ppo.n_envs, seed=seed, encoder=encoder, auto_reset=True)
    agent, rows = train(env, cfg.ppo, seed=seed, callback=callback)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows)
        save_policy(out / "checkpoint.bin", agent, encoder, {"seed": seed, "steps": rows[-1]["steps"]})
    return agent, rows


def evaluate(agent, env_cfg, n_episodes, seed, deterministic=True, encoder=None, tracks=None,
             speeds=None):
    """First episode of each of ``n_episodes`` independent environments."""
    if n_episodes < 1:
        raise EmptyInput("n_episodes must be >= 1")
    check_compatible(agent, env_cfg)
    env = ParkourEnv(env_cfg, n_envs=n_episodes, seed=seed, encoder=encoder, auto_reset=True)
    obs = env.reset(tracks=tracks, speeds=speeds)
    rng = np.random.default_rng([seed, 0xE7A1])
    first = {}
    while len(first) < n_episodes:
        action, _ = agent.act(obs, rng, deterministic=deterministic)
        obs = env.step(action).observation
        for ep in env.episodes:
            first.setdefault(ep["env"], ep)
    return [dict(first[i], episode=i) for i in range(n_episodes)]


def eval_policy(checkpoint, cfg, n_episodes=None, seed=None, deterministic=None, out_dir=None):
    """MetricsReport over fresh episodes; optional per-episode CSV."""
    n = cfg.eval.n_episodes if n_episodes is None else n_episodes
    if n < 1:
        raise EmptyInput("n_episodes must be >= 1")
    seed = cfg.seeds[0] if seed is None else seed
    det = cfg.eval.deterministic if deterministic is None else deterministic
    agent, encoder, _ = load_policy(checkpoint)
    env_cfg = cfg.env_config()
    episodes = evaluate(agent, env_cfg, n, seed, det, encoder)
    report = compute_metrics(episodes, cfg.physics.gravity, cfg.physics.leg_length,
                             env_cfg.episode_limit)
    if out_dir is not None:
        out = Path(out_dir)
        write_text(out / "eval_episodes.csv", csv_text(EPISODE_COLUMNS, episodes))
        write_text(out / "eval_report.csv", csv_text(REPORT_COLUMNS, [report.as_dict()]))
    return report, episodes


def trace_episode(agent, env_cfg, seed=0, encoder=None, track=None, speed=None, deterministic=True):
    """Per-step rows of one episode for export."""
    env = ParkourEnv(env_cfg, n_envs=1, seed=seed, encoder=encoder)
    obs = env.reset(tracks=None if track is None else [track],
                    speeds=None if speed is None else [speed])
    rng = np.random.default_rng([seed, 0x7ACE])
    rows = []
    for t in range(env_cfg.episode_limit):
        action, _ = agent.act(obs, rng, deterministic=deterministic)
        action = np.clip(action, -1.0, 1.0)
        res = env.step(action)
        b = env.state.base[0]
        row = {"step": t + 1, "p_x": b[PX], "p_z": b[PZ], "theta": b[THETA], "v_x": b[VX],
               "v_z": b[VZ], "omega": b[OMEGA], "reward": float(res.reward[0]),
               "r_track": float(res.r_track[0]), "r_regulation": float(res.r_regulation[0]),
               "termination": TERMINATIONS[res.termination[0]], "mode": res.info["mode"][0]}
        row.update({f"a{i}": float(action[0, i]) for i in range(ACTION_DIM)})
        rows.append({k: float(v) if isinstance(v, np.floating) else v for k, v in row.items()})
        obs = res.observation
        if env.state.done[0]:
            break
    return rows


# -- sweeps --------------------------------------------------------------------

def apply_axis(cfg, axis, value):
    if axis == "rho":
        return cfg.replace(rho=float(value))
    if axis == "horizon":
        return cfg.replace(horizon=int(value))
    if axis == "oracle":
        return cfg.replace(oracle=OracleKind(str(value)))
    if axis == "obs_mask":
        mask = tuple(value) if isinstance(value, (list, tuple)) else tuple(str(value).split("+"))
        return cfg.replace(obs_mask=mask)
    raise ConfigError(f"unknown sweep axis {axis!r}", "sweep.axis")


def _needs_encoder(cfg):
    return cfg.encoder.enabled and "z" in cfg.obs_mask


def run_cell(cfg, seed, out_dir=None):
    """Dataset, encoder, training and final evaluation for one seed."""
    encoder = None
    if _needs_encoder(cfg):
        encoder, _, _ = fit_encoder(cfg, build_dataset(cfg, seed), seed)
    agent, rows = train_policy(cfg, seed, out_dir, encoder)
    episodes = evaluate(agent, cfg.env_config(), max(cfg.eval.n_episodes, 1), seed + 10_000,
                        cfg.eval.deterministic, encoder)
    report = compute_metrics(episodes, cfg.physics.gravity, cfg.physics.leg_length,
                             cfg.track.episode_limit)
    if out_dir is not None:
        write_text(Path(out_dir) / "eval_episodes.csv", csv_text(EPISODE_COLUMNS, episodes))
        write_text(Path(out_dir) / "eval_report.csv", csv_text(REPORT_COLUMNS, [report.as_dict()]))
    return report


def _sweep_job(args):
    cfg, axis, value, seed, out_dir = args
    row = {"axis": axis, "value": value, "seed": seed, "status": "ok", "J_tilde": float("nan"),
           "J_true": float("nan"), "mean_return": float("nan"), "EL": float("nan"), "error": ""}
    try:
        report = run_cell(apply_axis(cfg, axis, value), seed, out_dir)
    except (OracleGuidedError, ArithmeticError, ValueError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
        return row
    row.update(J_tilde=report.J_tilde, J_true=report.J_true, mean_return=report.mean_return,
               EL=report.EL)
    return row


def _value_label(value):
    return "+".join(value) if isinstance(value, (list, tuple)) else str(value)


def pivot(rows):
    out = []
    values = []
    for r in rows:
        if _value_label(r["value"]) not in values:
            values.append(_value_label(r["value"]))
    for v in values:
        cell = [r for r in rows if _value_label(r["value"]) == v]
        ok = [r for r in cell if r["status"] == "ok"]
        jt = np.array([r["J_true"] for r in ok])
        jtt = np.array([r["J_tilde"] for r in ok])
        nan = float("nan")
        out.append({
            "value": v, "n_ok": len(ok), "n_failed": len(cell) - len(ok),
            "J_true_mean": float(jt.mean()) if len(ok) else nan,
            "J_true_std": float(jt.std()) if len(ok) else nan,
            "J_tilde_mean": float(jtt.mean()) if len(ok) else nan,
            "J_tilde_std": float(jtt.std()) if len(ok) else nan,
        })
    return out


def sweep(cfg, axis=None, values=None, seeds=None, out_dir=None, workers=None):
    """One run per (value, seed); failures are recorded and the sweep goes on.

    Returns (long rows, pivot rows)."""
    axis = cfg.sweep.axis if axis is None else axis
    values = tuple(cfg.sweep.values if values is None else values)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    workers = cfg.sweep.workers if workers is None else workers
    if not values:
        raise ConfigError("sweep needs at least one value", "sweep.values")
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for value in values:
        for seed in seeds:
            cell_dir = None
            if out is not None:
                cell_dir = out / f"{axis}={_value_label(value)}" / f"seed_{seed}"
            jobs.append((cfg, axis, value, seed, cell_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    summary = pivot(rows)
    if out is not None:
        write_text(out / "sweep_long.csv", csv_text(SWEEP_COLUMNS, rows))
        write_text(out / "sweep_pivot.csv", csv_text(PIVOT_COLUMNS, summary))
        write_manifest(out)
    return rows, summary


# -- versatility grid ----------------------------------------------------------

def _dilated(lo, hi, factor):
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * factor
    return max(mid - half, 1e-3), mid + half


def mode_versatility_grid(agent, cfg, encoder=None, seed=0, out_path=None):
    """Mean undiscounted return on single-obstacle tracks over the dilated
    parameter box; rows carry the training box for plotting its boundary."""
    g, r = cfg.grid, cfg.ranges
    env_cfg = cfg.env_config()
    rows = []
    for kind in g.kinds:
        w_box = r.jump_w if kind == "block" else r.leap_w
        s_box = r.jump_h if kind == "block" else r.leap_d
        ws = np.linspace(*_dilated(*w_box, r.dilation), g.n_width) if g.n_width > 1 else [np.mean(w_box)]
        ss = np.linspace(*_dilated(*s_box, r.dilation), g.n_size) if g.n_size > 1 else [np.mean(s_box)]
        for w in ws:
            for s in ss:
                track = single_obstacle_track(kind, float(w), float(s),
                                              length=env_cfg.track_length, start=2.0)
                eps = evaluate(agent, env_cfg, g.episodes_per_cell, seed, True, encoder,
                               tracks=[track] * g.episodes_per_cell,
                               speeds=[g.speed] * g.episodes_per_cell)
                inside = w_box[0] <= w <= w_box[1] and s_box[0] <= s <= s_box[1]
                rows.append({
                    "kind": kind, "w": float(w), "size": float(s), "in_training_box": int(inside),
                    "mean_return": float(np.mean([e["return"] for e in eps])),
                    "episodes": len(eps), "box_w_lo": w_box[0], "box_w_hi": w_box[1],
                    "box_size_lo": s_box[0], "box_size_hi": s_box[1],
                })
    if out_path is not None:
        write_text(out_path, csv_text(GRID_COLUMNS, rows))
    return rows


# -- oracle visualization ------------------------------------------------------

def oracle_reference(cfg, mode, obstacle_start=1.0, v=None, w=None, size=None):
    """Reference from rest in front of a single obstacle, as CSV rows."""
    r = cfg.ranges
    v = float(np.mean(r.pace_v)) if v is None else v
    n = int(round(4.0 / 0.01)) + 1
    xs = np.arange(n) * 0.01
    heights = np.zeros(n)
    gaps = np.zeros(n, bool)
    if mode == "pace":
        spec = ModeSpec("pace", v=v)
    elif mode in ("jump", "leap"):
        w_box = r.jump_w if mode == "jump" else r.leap_w
        s_box = r.jump_h if mode == "jump" else r.leap_d
        w = float(np.mean(w_box)) if w is None else w
        size = float(np.mean(s_box)) if size is None else size
        inside = (xs >= obstacle_start) & (xs < obstacle_start + w)
        if mode == "jump":
            heights[inside] = size
            spec = ModeSpec("jump", v=v, w=w, h=size)
        else:
            heights[inside] = -size
            gaps[inside] = True
            spec = ModeSpec("leap", v=v, w=w, d=size)
    else:
        raise ConfigError(f"oracle-viz supports pace, jump and leap, not {mode!r}", "mode")
    x = np.zeros(7)
    x[PZ], x[6] = cfg.physics.nominal_height, 1.0
    oracle = make_oracle(cfg)
    ref = oracle.predict(OracleQuery(x, spec, TerrainWindow(0.0, 0.01, heights, gaps), cfg.horizon))
    return [dict(zip(REFERENCE_COLUMNS, row)) for row in reference_rows(ref)]


# -- full experiment -----------------------------------------------------------

def run_directory(cfg):
    seeds = "-".join(str(s) for s in cfg.seeds)
    return Path(cfg.output_dir) / f"{cfg.name}_seed{seeds}"


def run_experiment(cfg, log=None):
    """Resolved config, dataset, encoder, training logs, checkpoints and
    metrics under one seed-named directory with a hash manifest."""
    root = run_directory(cfg)
    write_text(root / "config.resolved.json", dump_resolved(cfg))
    reports = []
    for seed in cfg.seeds:
        cell = root / f"seed_{seed}"
        encoder = None
        if _needs_encoder(cfg):
            dataset = build_dataset(cfg, seed)
            write_dataset(dataset, cell / "dataset.csv")
            encoder, diag, z = fit_encoder(cfg, dataset, seed)
            save_checkpoint(cell / "encoder.bin", encoder.arrays(), {"seed": seed})
            write_text(cell / "latents.csv", latent_csv(z, dataset.labels))
            write_text(cell / "encoder_loss.csv",
                       csv_text(("epoch", "loss"), [{"epoch": i, "loss": l}
                                                     for i, l in enumerate(encoder.loss_curve_)]))
            write_text(cell / "encoder_report.csv", csv_text(tuple(diag), [diag]))
        def callback(row, agent, seed=seed):
            log(f"seed {seed} iter {row['iter']} steps {row['steps']} "
                f"return {row['mean_return']:.2f} J {row['J_true']:.3f}")
        agent, _ = train_policy(cfg, seed, cell, encoder, None if log is None else callback)
        if cfg.eval.n_episodes > 0:
            episodes = evaluate(agent, cfg.env_config(), cfg.eval.n_episodes, seed + 10_000,
                                cfg.eval.deterministic, encoder)
            report = compute_metrics(episodes, cfg.physics.gravity, cfg.physics.leg_length,
                                     cfg.track.episode_limit)
            write_text(cell / "eval_episodes.csv", csv_text(EPISODE_COLUMNS, episodes))
            reports.append(dict(report.as_dict(), seed=seed))
    if reports:
        write_text(root / "report.csv", csv_text(("seed",) + REPORT_COLUMNS, reports))
    write_manifest(root)
    return root
