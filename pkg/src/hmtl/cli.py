"""Command-line entry points.

Subcommands: ``synth`` (write a synthetic dataset folder), ``train`` /
``pretrain`` (execute a config file), ``eval`` (metrics for a checkpoint),
``attack`` (epsilon sweep), ``report`` (render CSVs into figures and a
summary table).

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime invariant
violation. ``HMTL_OUT_DIR`` provides the default output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import adversarial, reporting, trainer
from .config import ConfigError, DataConfig, build_dataset, dump_config, load_config_file
from .datasets import synth_faces, task_from_name, write_folder
from .heads import load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUT_DIR_ENV = "HMTL_OUT_DIR"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we reserve that for config errors
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hmtl", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p_synth = sub.add_parser("synth", help="write a synthetic dataset folder")
    p_synth.add_argument("--out", required=True, help="destination folder")
    p_synth.add_argument("--task", default="classification", help="classification|valence_arousal|head_pose|gender")
    p_synth.add_argument("--classes", type=int, default=8)
    p_synth.add_argument("--n", type=int, default=800)
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.add_argument("--side", type=int, default=64)
    p_synth.add_argument("--proportions", default=None, help="comma-separated class proportions")

    for name, help_text in (("train", "run a training protocol"), ("pretrain", "run self-supervised pre-training")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="config file (sectioned key=value)")
        p.add_argument("--out", default=None, help="output directory (overrides config/run.out_dir)")
        p.add_argument("--checkpoint", default=None, help="source checkpoint for fine_tune/frozen_eval/stage-2")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the config's validation split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None, help="optional CSV to write the metrics into")

    p_attack = sub.add_parser("attack", help="epsilon-sweep robustness evaluation")
    p_attack.add_argument("--config", required=True)
    p_attack.add_argument("--checkpoint", required=True)
    p_attack.add_argument("--epsilons", default=None, help="comma-separated ascending epsilons")
    p_attack.add_argument("--out", default=None, help="sweep CSV destination")

    p_report = sub.add_parser("report", help="render metrics/sweep CSVs into figures and a summary table")
    p_report.add_argument("--runs", nargs="+", required=True, help="run directories")
    p_report.add_argument("--out", default=None, help="report directory")

    return parser


def _default_out(explicit: Optional[str], fallback: str) -> str:
    if explicit:
        return explicit
    return os.environ.get(OUT_DIR_ENV, fallback)


def _val_records(run_cfg, data_cfg):
    dataset, val_dataset = build_dataset(data_cfg)
    if val_dataset is not None:
        return dataset.task, list(val_dataset.records)
    _, val = trainer.split_train_val(dataset, run_cfg.val_fraction)
    return dataset.task, val


def _cmd_synth(args) -> int:
    task = task_from_name(args.task, args.classes)
    proportions = [float(t) for t in args.proportions.split(",")] if args.proportions else None
    dataset = synth_faces(args.n, args.seed, task, side=args.side, proportions=proportions)
    write_folder(dataset, args.out)
    counts = dataset.class_counts.tolist() if dataset.task.categorical else []
    print(f"wrote {len(dataset)} samples to {args.out}" + (f" (class counts {counts})" if counts else ""))
    return EXIT_OK


def _cmd_train(args, pretrain: bool) -> int:
    run_cfg, data_cfg = load_config_file(args.config)
    if pretrain and run_cfg.protocol != "ssl_pretrain":
        raise ConfigError(f"pretrain expects protocol ssl_pretrain, config says {run_cfg.protocol!r}")
    out_dir = _default_out(args.out, run_cfg.out_dir or "runs/latest")
    run_cfg = trainer.replace(run_cfg, out_dir=out_dir)

    dataset, val_dataset = build_dataset(data_cfg)
    result = trainer.run_protocol(run_cfg, dataset, val_dataset, checkpoint=args.checkpoint)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(run_cfg, data_cfg), encoding="utf-8")
    summary = {
        "protocol": result.protocol,
        "best_seed": result.best.seed,
        "best_checkpoint": result.best_checkpoint,
        "final_val": result.best.final_val,
        "steps_to_threshold": {str(k): v for k, v in result.best.steps_to_threshold.items()},
    }
    (out / "result.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    for run in result.seed_runs:
        metrics = ", ".join(f"{k}={v:.4f}" for k, v in sorted(run.final_val.items()))
        print(f"seed {run.seed}: best epoch {run.best_epoch}, {metrics}")
    print(f"best seed {result.best.seed}; artifacts in {out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    run_cfg, data_cfg = load_config_file(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    task, records = _val_records(run_cfg, data_cfg)
    metrics = trainer.evaluate_supervised(model, records, task, run_cfg.loss)
    flat = metrics.flat()
    for key in sorted(flat):
        print(f"{key} = {flat[key]:.6f}")
    if args.out:
        rows = [(0, "val", *trainer._csv_head_metric(k), v) for k, v in sorted(flat.items())]
        reporting.append_metrics_csv(args.out, rows)
    return EXIT_OK


def _cmd_attack(args) -> int:
    run_cfg, data_cfg = load_config_file(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    task, records = _val_records(run_cfg, data_cfg)
    if not task.categorical:
        raise ConfigError("attack requires a categorical task")
    if args.epsilons:
        epsilons = tuple(float(t) for t in args.epsilons.split(","))
        attack_cfg = adversarial.AttackConfig(epsilons=epsilons)
    else:
        attack_cfg = adversarial.AttackConfig()
    rows = adversarial.epsilon_sweep(model, records, attack_cfg)
    for row in rows:
        print(f"epsilon {row.epsilon:g}: accuracy {row.accuracy:.4f} ({row.correct}/{row.n})")
    out = args.out or str(Path(_default_out(None, "runs/latest")) / "sweep.csv")
    reporting.write_sweep_csv(out, rows)
    print(f"sweep written to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out = _default_out(args.out, "report")
    missing = [d for d in args.runs if not Path(d).is_dir()]
    if missing:
        raise FileNotFoundError(f"run directories not found: {missing}")
    summaries = reporting.render_report(args.runs, out)
    print(f"report for {len(summaries)} run(s) written to {out}")
    return EXIT_OK


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command in ("train", "pretrain"):
            return _cmd_train(args, pretrain=args.command == "pretrain")
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, AssertionError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
