"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .config import load_config, schema
from .dataset import latent_csv, read_dataset, write_dataset
from .exceptions import ConfigError, OracleGuidedError
from .metrics import REPORT_COLUMNS
from .nn import save_checkpoint
from .oracle import REFERENCE_COLUMNS, OracleKind

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v != ""]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seeds:
        cfg = cfg.replace(seeds=tuple(args.seeds))
    if args.out:
        cfg = cfg.replace(output_dir=str(args.out))
    root = harness.run_experiment(cfg, log=None if args.quiet else _log)
    print(root)


def cmd_eval(args):
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    report, _ = harness.eval_policy(args.checkpoint, cfg, args.episodes, args.seed,
                                    not args.stochastic, out)
    harness.write_manifest(out)
    print(harness.csv_text(REPORT_COLUMNS, [report.as_dict()]), end="")


def cmd_sweep(args):
    cfg = load_config(args.config)
    axis = args.axis or cfg.sweep.axis
    values = args.values
    if values is not None:
        if axis in ("rho",):
            values = [float(v) for v in values]
        elif axis == "horizon":
            values = [int(v) for v in values]
        elif axis == "obs_mask":
            values = [tuple(v.split("+")) for v in values]
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"sweep_{axis}"
    _, summary = harness.sweep(cfg, axis, values, args.seeds or None, out, args.workers)
    print(harness.csv_text(harness.PIVOT_COLUMNS, summary), end="")


def cmd_gen_dataset(args):
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    if args.n_per_mode is not None:
        cfg = cfg.replace(encoder=dataclasses.replace(cfg.encoder, n_per_mode=args.n_per_mode))
    dataset = harness.build_dataset(cfg, seed)
    manifest = write_dataset(dataset, args.out)
    print(json.dumps(manifest["counts"], sort_keys=True))


def cmd_train_encoder(args):
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    dataset = read_dataset(args.dataset)
    if dataset.horizon != cfg.horizon:
        raise ConfigError(f"dataset horizon {dataset.horizon} differs from config horizon {cfg.horizon}",
                          "horizon")
    encoder, diag, z = harness.fit_encoder(cfg, dataset, seed)
    out = Path(args.out)
    save_checkpoint(out / "encoder.bin", encoder.arrays(), {"seed": seed})
    harness.write_text(out / "latents.csv", latent_csv(z, dataset.labels))
    harness.write_text(out / "encoder_loss.csv", harness.csv_text(
        ("epoch", "loss"), [{"epoch": i, "loss": l} for i, l in enumerate(encoder.loss_curve_)]))
    harness.write_text(out / "encoder_report.csv", harness.csv_text(tuple(diag), [diag]))
    harness.write_manifest(out)
    print(harness.csv_text(tuple(diag), [diag]), end="")


def cmd_oracle_viz(args):
    cfg = load_config(args.config)
    if args.oracle:
        cfg = cfg.replace(oracle=OracleKind(args.oracle))
    rows = harness.oracle_reference(cfg, args.mode, args.start, args.v, args.w, args.size)
    text = harness.csv_text(REFERENCE_COLUMNS, rows)
    if args.out:
        harness.write_text(args.out, text)
    else:
        print(text, end="")


def cmd_versatility_grid(args):
    cfg = load_config(args.config)
    agent, encoder, _ = harness.load_policy(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "versatility_grid.csv"
    seed = cfg.seeds[0] if args.seed is None else args.seed
    rows = harness.mode_versatility_grid(agent, cfg, encoder, seed, out)
    print(f"{len(rows)} cells -> {out}")


def cmd_schema(args):
    print(json.dumps(schema(), indent=2, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="ogmp", description="Oracle-guided multi-mode policy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="dataset, encoder, PPO training and evaluation per seed")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=_csv_list(int))
    s.add_argument("--out")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a policy checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--stochastic", action="store_true", help="sample actions instead of the mean")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train one run per (value, seed) along an ablation axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=("rho", "oracle", "horizon", "obs_mask"))
    s.add_argument("--values", type=_csv_list(str))
    s.add_argument("--seeds", type=_csv_list(int))
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gen-dataset", help="balanced modal dataset from the oracle")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-per-mode", type=int)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train-encoder", help="fit the mode encoder on a dataset CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_encoder)

    s = sub.add_parser("oracle-viz", help="reference trajectory CSV for one mode")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", default="jump", choices=("pace", "jump", "leap"))
    s.add_argument("--oracle", choices=("li", "lqr", "prev"))
    s.add_argument("--v", type=float)
    s.add_argument("--w", type=float)
    s.add_argument("--size", type=float, help="block height or gap depth")
    s.add_argument("--start", type=float, default=1.0, help="obstacle start (m)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle_viz)

    s = sub.add_parser("versatility-grid", help="returns over a dilated obstacle grid")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_versatility_grid)

    s = sub.add_parser("schema", help="print the configuration schema with defaults")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (OracleGuidedError, OSError, ArithmeticError, ValueError) as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
