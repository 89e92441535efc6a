"""Command line interface: run one experiment, sweep an axis, or probe CKA."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import (encoder_from_arrays, load_arrays, model_from_arrays,
                         projection_from_arrays)
from .config import ConfigError, parse_config
from .data import load_csv
from .harness import StageError, run_experiment, run_sweep
from .metrics import extract_features, linear_cka


def _default_out() -> str:
    return os.environ.get("FEATKD_OUT", "runs")


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or cfg.out_dir or _default_out()
    log = run_experiment(cfg, out_dir=out)
    print(f"run {log.summary['config_hash']}: "
          f"final eval acc {log.summary['final_eval_acc']} "
          f"(error {log.summary['final_eval_error']})")
    print(f"artifacts: {Path(out) / log.summary['config_hash']}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    if "=" not in args.axis:
        raise ConfigError("--axis must look like name=value1,value2,...")
    axis, _, raw_values = args.axis.partition("=")
    values = [v.strip() for v in raw_values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = args.out or cfg.out_dir or _default_out()
    rows = run_sweep(cfg, axis, values, seeds, out_dir=out)
    for row in rows:
        if row["kind"] == "aggregate":
            print(f"{axis}={row['value']}: eval acc "
                  f"{row['eval_acc']:.4f} +/- {row['eval_acc_std']:.4f} ({row['status']})")
    print(f"sweep table: {Path(out) / f'sweep_{axis}.csv'}")
    return 0


def _cmd_probe_cka(args) -> int:
    arrays = load_arrays(args.checkpoint)
    bundle = load_csv(args.data)
    x = bundle.eval_x if len(bundle.eval_x) else bundle.labeled_x
    if len(x) < 2:
        raise ValueError("probe-cka needs at least 2 eval or labeled rows")
    student = model_from_arrays(arrays, "student")
    f_s = extract_features(student.encoder.forward, x, "f_s", cap=args.cap)
    if not any(k.startswith("teacher_encoder.") for k in arrays):
        raise ValueError("checkpoint has no teacher encoder; probe-cka needs a "
                         "full training checkpoint (final.npz)")
    teacher_enc = encoder_from_arrays(arrays, "teacher_encoder")
    f_t = extract_features(teacher_enc.forward, x, "f_t", cap=args.cap)
    print(f"cka_fs_ft: {linear_cka(f_s, f_t):.6f}")
    if any(k.startswith("proj_t.") for k in arrays):
        proj_t = projection_from_arrays(arrays, "proj_t")
        f_tilde = extract_features(
            lambda t: proj_t.forward(teacher_enc.forward(t), training=False),
            x, "f~_t", cap=args.cap)
        print(f"cka_fs_ftilde: {linear_cka(f_s, f_tilde):.6f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featkd",
        description="Feature-customizing knowledge distillation on synthetic benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a YAML config")
    p_run.add_argument("--config", required=True, help="config path or inline YAML")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output directory (default $FEATKD_OUT or ./runs)")

    p_sweep = sub.add_parser("sweep", help="run an axis x seeds grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", required=True, help="axis spec, e.g. method=none,customkd")
    p_sweep.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2")
    p_sweep.add_argument("--out", default=None)

    p_probe = sub.add_parser("probe-cka", help="CKA between checkpointed feature spaces")
    p_probe.add_argument("--checkpoint", required=True, help="a final.npz checkpoint")
    p_probe.add_argument("--data", required=True, help="benchmark CSV")
    p_probe.add_argument("--cap", type=int, default=2048, help="max rows used")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_probe_cka(args)
    except (ConfigError, StageError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
