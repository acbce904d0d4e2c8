"""Command-line interface.

Subcommands: generate, train, embed, evaluate, grid, project. Exit codes:
0 success, 2 config error, 3 numeric error, 4 contract error. Grid worker
count is capped by the AURORA_THREADS environment variable (default 1, which
also guarantees byte-identical reruns).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .cohort import generate, load_cohort, save_cohort
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .harness import (GRID_METHODS, TrainingDiverged, default_config, embed,
                      evaluate, load_config, load_store, log_to_csv,
                      project_store_csv, run_grid, save_store, train)
from .metrics import MetricsTable


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aurora",
        description="Orthogonal contextual subspace representation learning "
                    "on synthetic cohorts.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shifted", action="store_true",
                   help="apply the config's shift spec")

    p = sub.add_parser("train", help="train one method, write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", help="embed a cohort with a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="metrics CSV for an embedding store")
    p.add_argument("--store", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--method", default=None, help="method label for the table")

    p = sub.add_parser("grid", help="train all methods, write report + metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report markdown path")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds to aggregate")

    p = sub.add_parser("project", help="2-D PCA coordinates for plotting")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    cohort_cfg = replace(cfg.cohort, seed=cfg.seed,
                         shift=cfg.shift if args.shifted else None)
    records = generate(cohort_cfg)
    save_cohort(records, cohort_cfg, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    log_path = args.out + ".log.csv"
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        save_checkpoint(exc.bundle, args.out)
        with open(log_path, "w", newline="") as fh:
            fh.write(log_to_csv(exc.log))
        print(f"error: {exc} (last finite state saved to {args.out})",
              file=sys.stderr)
        return 3
    save_checkpoint(result.bundle, args.out)
    with open(log_path, "w", newline="") as fh:
        fh.write(log_to_csv(result.log))
    print(f"trained {cfg.method} for {cfg.optimizer.epochs} epochs; "
          f"checkpoint at {args.out}, log at {log_path}")
    return 0


def _cmd_embed(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    records, _ = load_cohort(args.cohort)
    store = embed(bundle, records)
    save_store(store, args.out)
    print(f"embedded {len(records)} records to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    store = load_store(args.store)
    records, meta = load_cohort(args.cohort)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(seed=0)
        cfg = replace(cfg, cohort=replace(cfg.cohort, n=meta["n"], p=meta["p"],
                                          sites=meta["S"]),
                      encoder=EncoderConfig(input_dim=meta["p"]))
    table = evaluate(store, records, cfg, method=args.method or cfg.method)
    with open(args.out, "w", newline="") as fh:
        fh.write(table.to_csv())
    print(f"wrote {len(table.rows)} metric rows to {args.out}")
    return 0


def _cmd_grid(args) -> int:
    cfg = load_config(args.config)
    seeds = tuple(cfg.seed + i for i in range(max(1, args.seeds)))
    result = run_grid(cfg, methods=GRID_METHODS, seeds=seeds)
    with open(args.out, "w", newline="") as fh:
        fh.write(result.report)
    csv_path = os.path.join(os.path.dirname(os.path.abspath(args.out)), "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(result.table.to_csv())
    print(f"wrote report to {args.out} and metrics to {csv_path}")
    return 0


def _cmd_project(args) -> int:
    store = load_store(args.store)
    with open(args.out, "w", newline="") as fh:
        fh.write(project_store_csv(store))
    print(f"wrote PCA coordinates for {store.ids.shape[0]} records to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "evaluate": _cmd_evaluate,
    "grid": _cmd_grid,
    "project": _cmd_project,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
