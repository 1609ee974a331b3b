"""Command line entry point.

Subcommands: gen-data, train, eval, ablate, sweep, diagnose, plot.
Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .autodiff import load_checkpoint
from .config import ConfigError, ExperimentConfig, default_config, dump_config, load_config
from .detector import Detector, infer
from .errors import NumericalAbort, ValidationError
from .experiments import FULL_GRID, GRADUAL_GRID, SWEEP_AXES, dataset, diagnose, run_ablation, run_cell, run_dir, run_sweep
from .metrics import evaluate, report_csv
from .plots import plot_files
from .scenes import write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds needs at least one seed")
    return seeds


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    cfg = replace(cfg, data=data)
    train_set, val_set = dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", train_set)
    write_jsonl(out / "val.jsonl", val_set)
    print(f"wrote {len(train_set)} train and {len(val_set)} val scenes to {out}")
    return EXIT_OK


def _print_metrics(metrics: dict[str, float]) -> None:
    print(" ".join(f"{k}={v:.2f}" for k, v in metrics.items()))


def cmd_train(args) -> int:
    cfg = _config(args)
    cell = run_cell(cfg, cfg.seed)
    if not cell.ok:
        print(f"numerical abort: {cell.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"run directory {cell.run_dir}")
    _print_metrics(cell.metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir(cfg, cfg.seed) / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; train first or pass --checkpoint")
    model = Detector(cfg.model_for_seed())
    load_checkpoint(ckpt, model.parameters())
    _, val_set = dataset(cfg)
    k = min(cfg.eval.max_dets, cfg.model.queries * cfg.model.categories)
    dets = [d for s in val_set for d in infer(model, s, k)]
    report = evaluate(dets, val_set, cfg.model.categories, cfg.eval.max_dets, cfg.eval.lrp_tau)
    (ckpt.parent / "eval.csv").write_text(report_csv(report))
    _print_metrics(report.row())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    grid = FULL_GRID if args.grid == "full" else GRADUAL_GRID
    table = run_ablation(grid, cfg, args.seeds, cfg.out)
    sys.stdout.write(table.csv)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [v for v in args.values.split(",") if v]
    table = run_sweep(args.axis, values, cfg, args.seeds, cfg.out)
    sys.stdout.write(table.csv)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    files = diagnose(cfg, cfg.seed, cfg.out)
    for name in files:
        print(Path(run_dir(cfg, cfg.seed, cfg.out)) / name)
    return EXIT_OK


def cmd_plot(args) -> int:
    plot_files(args.inputs, args.out, args.title)
    print(args.out)
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(dump_config(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toydetr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--config", metavar="PATH", help="flat key = value config file")
        sp.add_argument("--out", metavar="DIR", help="output root (overrides run.out)")
        if seeds:
            sp.add_argument("--seeds", type=_seeds, default=[0, 1, 2], metavar="N,M,K")
        else:
            sp.add_argument("--seed", type=int, metavar="N")

    sp = sub.add_parser("gen-data", help="write the train/val scenes as JSON lines")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)
    sp = sub.add_parser("train", help="train and evaluate one cell")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", help="evaluate a trained checkpoint on the val split")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("ablate", help="toggle-combination ablation table")
    common(sp, seeds=True)
    sp.add_argument("--grid", choices=("gradual", "full"), default="gradual")
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("sweep", help="one-axis sweep table")
    common(sp, seeds=True)
    sp.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sp.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,4,6 or norm_giou_pow:1,iou_pow:2")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("diagnose", help="score and unmatched-IoU CDFs for a trained cell")
    common(sp)
    sp.set_defaults(func=cmd_diagnose)
    sp = sub.add_parser("plot", help="render curve CSVs to an SVG line chart")
    sp.add_argument("inputs", nargs="+", metavar="CSV")
    sp.add_argument("--out", required=True, metavar="SVG")
    sp.add_argument("--title", default="")
    sp.set_defaults(func=cmd_plot)
    sp = sub.add_parser("show-config", help="print the effective config")
    common(sp)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
