"""Command-line front end.

Subcommands cover the whole workflow: simulate worlds, render canvases,
run attacks (plain, transfer, overfit sweep), evaluate defenses, and query
the privacy accountant.  Every subcommand accepts ``--seed``, which
overrides the config file's seed so one config can drive a seed grid.
Outputs are deterministic: rerunning a subcommand with the same config and
seed rewrites byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
from dataclasses import replace
from typing import Optional

from .canvas import render as render_canvas
from .core import Source
from .formats import (
    ConfigError,
    ImageFormat,
    RunConfig,
    config_to_dict,
    export_canvas,
    load_config,
    load_dump,
    load_records_dir,
    metrics_to_dict,
    save_world,
    write_report,
)
from .pipeline import defense_eval, overfit_sweep, run_attack, transfer_attack
from .postprocess import harvest
from .privacy import privacy_loss
from .simulator import generate_world

__all__ = ["main"]

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def _load_run_config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else load_config(path)


def _resolve_seed(cfg: RunConfig, override: Optional[int]) -> int:
    return cfg.seed if override is None else override


def _cmd_simulate(args) -> int:
    cfg = _load_run_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    world = generate_world(
        cfg.simulator, cfg.n_per_split, seed, shadow_cfg=cfg.shadow_simulator
    )
    paths = save_world(world, args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_render(args) -> int:
    cfg = _load_run_config(args.config)
    items = load_dump(args.dump)
    os.makedirs(args.out, exist_ok=True)
    fmt = ImageFormat(args.format)
    for item in items:
        det = getattr(item, "detections", item)
        if not _SAFE_ID.match(det.image_id):
            raise ValueError(f"image id {det.image_id!r} is not a safe file name")
        canvas = render_canvas(
            harvest(det, cfg.experiment.postprocess_cfg), cfg.experiment.canvas_cfg
        )
        export_canvas(canvas, os.path.join(args.out, f"{det.image_id}.{fmt.value}"), fmt)
    print(f"rendered {len(items)} canvases to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_run_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    exp = replace(cfg.experiment, seed=seed)
    shadow = load_records_dir(args.shadow, Source.SHADOW)
    target = load_records_dir(args.target, Source.TARGET)
    result = run_attack(shadow, target, exp)
    resolved = replace(cfg, seed=seed, experiment=exp)
    write_report(
        {
            "command": "attack",
            "config": config_to_dict(resolved),
            "seed": seed,
            "target": metrics_to_dict(result.target),
            "validation": metrics_to_dict(result.validation),
        },
        args.report,
    )
    print(
        f"target accuracy {result.target.accuracy:.4f}, "
        f"average recall {result.target.average_recall:.4f}, "
        f"validation accuracy {result.validation.accuracy:.4f}"
    )
    return 0


def _cmd_transfer(args) -> int:
    cells = []
    accuracies: dict[tuple[str, str], float] = {}
    for shadow_path in args.shadow_config:
        shadow_cfg = load_config(shadow_path)
        shadow_seed = _resolve_seed(shadow_cfg, args.seed)
        exp = replace(shadow_cfg.experiment, seed=shadow_seed)
        shadow_world = generate_world(
            shadow_cfg.simulator, shadow_cfg.n_per_split, shadow_seed
        )
        for target_path in args.target_config:
            target_cfg = load_config(target_path)
            target_seed = _resolve_seed(target_cfg, args.seed)
            target_world = generate_world(
                target_cfg.simulator, target_cfg.n_per_split, target_seed
            )
            result = transfer_attack(
                shadow_world.shadow_records(), target_world.target_records(), exp
            )
            accuracies[(shadow_path, target_path)] = result.target.accuracy
            cells.append(
                {
                    "shadow_config": shadow_path,
                    "target_config": target_path,
                    "shadow_seed": shadow_seed,
                    "target_seed": target_seed,
                    "target": metrics_to_dict(result.target),
                    "validation": metrics_to_dict(result.validation),
                }
            )
            print(
                f"{shadow_path} -> {target_path}: "
                f"accuracy {result.target.accuracy:.4f}"
            )
    write_report(
        {
            "command": "transfer",
            "configs": {
                path: config_to_dict(load_config(path))
                for path in sorted(set(args.shadow_config) | set(args.target_config))
            },
            "cells": cells,
        },
        args.report,
    )
    if args.csv:
        _write_transfer_csv(args.shadow_config, args.target_config, accuracies, args.csv)
    return 0


def _write_transfer_csv(
    shadow_paths: list[str],
    target_paths: list[str],
    accuracies: dict[tuple[str, str], float],
    path: str,
) -> None:
    # Rows are shadow configs, columns target configs, values target accuracy.
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shadow\\target"] + list(target_paths))
        for sp in shadow_paths:
            writer.writerow([sp] + [repr(accuracies[(sp, tp)]) for tp in target_paths])


def _cmd_sweep(args) -> int:
    cfg = _load_run_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    if args.levels is not None:
        levels = tuple(float(v) for v in args.levels.split(","))
    else:
        levels = cfg.sweep_levels
    exp = replace(cfg.experiment, seed=seed)
    points = overfit_sweep(levels, exp, cfg.simulator, cfg.n_per_split, world_seed=seed)
    resolved = replace(cfg, seed=seed, experiment=exp, sweep_levels=levels)
    write_report(
        {
            "command": "sweep",
            "config": config_to_dict(resolved),
            "seed": seed,
            "points": [
                {"level": level, "target": metrics_to_dict(m)} for level, m in points
            ],
        },
        args.report,
    )
    for level, m in points:
        print(f"level {level:.2f}: accuracy {m.accuracy:.4f}")
    return 0


def _cmd_defend(args) -> int:
    cfg = _load_run_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    if cfg.defense is None:
        raise ConfigError("config has no defense section")
    plan = cfg.defense
    rows = defense_eval(plan.rows, plan.task, plan.train, seed=seed)
    resolved = replace(cfg, seed=seed)
    write_report(
        {
            "command": "defend",
            "config": config_to_dict(resolved),
            "seed": seed,
            "rows": [
                {
                    "defense": r.defense,
                    "utility_train": r.utility_train,
                    "utility_test": r.utility_test,
                    "attack": metrics_to_dict(r.attack),
                    "epsilon": r.epsilon,
                }
                for r in rows
            ],
        },
        args.report,
    )
    for r in rows:
        eps = "inf" if r.epsilon == float("inf") else f"{r.epsilon:.6f}"
        print(
            f"{r.defense}: utility {r.utility_test:.4f}, "
            f"attack accuracy {r.attack.accuracy:.4f}, epsilon {eps}"
        )
    return 0


def _cmd_account(args) -> int:
    eps = privacy_loss(args.sigma, args.epochs, args.delta)
    print(f"{eps:.6f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxmia",
        description="Membership inference on object-detector outputs: "
        "simulate, attack, defend, account.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate world dumps")
    p.add_argument("--config", default=None, help="run config file (YAML)")
    p.add_argument("--out", required=True, help="output directory for the four dumps")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("render", parents=[common], help="render dump to canvas images")
    p.add_argument("--in", dest="dump", required=True, help="detection dump to render")
    p.add_argument("--config", default=None, help="run config file (YAML)")
    p.add_argument("--out", required=True, help="output directory for images")
    p.add_argument("--format", choices=[f.value for f in ImageFormat], default="pgm")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("attack", parents=[common], help="train on shadow, attack target")
    p.add_argument("--shadow", required=True, help="directory of shadow dumps")
    p.add_argument("--target", required=True, help="directory of target dumps")
    p.add_argument("--config", default=None, help="run config file (YAML)")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("transfer", parents=[common], help="cross-world transfer matrix")
    p.add_argument(
        "--shadow-config", action="append", required=True, help="shadow world config (repeatable)"
    )
    p.add_argument(
        "--target-config", action="append", required=True, help="target world config (repeatable)"
    )
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="optional accuracy matrix CSV")
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("sweep", parents=[common], help="attack accuracy vs overfit level")
    p.add_argument("--config", default=None, help="run config file (YAML)")
    p.add_argument("--levels", default=None, help="comma-separated overfit levels")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("defend", parents=[common], help="defense utility/attack table")
    p.add_argument("--config", required=True, help="run config file with a defense section")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=_cmd_defend)

    p = sub.add_parser("account", parents=[common], help="closed-form privacy loss")
    p.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p.add_argument("--epochs", type=float, required=True, help="accounted epochs")
    p.add_argument("--delta", type=float, default=1e-5, help="failure probability")
    p.set_defaults(func=_cmd_account)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        # Covers config/schema errors (ConfigError, DumpFormatError are
        # ValueErrors), contract violations from the pipeline, and I/O.
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
