"""Command-line entry point: ``fedcka <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, ExperimentConfig, ensure_writable_dir, from_preset
from .errors import ConfigError, ContractError, FedCKAError, IngestionError
from .experiments import (
    ABLATION_COLUMNS,
    BENCH_COLUMNS,
    BENCH_METHODS,
    SWEEP_COLUMNS,
    bench,
    layer_sweep,
    load_data,
    metric_ablation,
    run_partition,
    run_train,
    similarity_profile,
    write_profile_csv,
    write_rows,
)
from .federation import SIMILARITY_METRICS
from .model import load_checkpoint
from .similarity import all_metrics, read_activation_dump

logger = logging.getLogger("fedcka")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment configuration (overrides --preset and --config)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="starting point for the configuration")
    g.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = type(f.default) if f.default is not None else str
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = from_preset(args.preset) if args.preset else ExperimentConfig()
    if args.config is not None:
        cfg = cfg.overlay_file(args.config)
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcka", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="write partition.csv and heatmap.csv")
    _add_config_flags(p)

    p = sub.add_parser("train", help="run one federated experiment")
    _add_config_flags(p)
    p.add_argument("--save-clients", action="store_true", help="also checkpoint every final local model")

    p = sub.add_parser("similarity", help="pairwise metrics of two dumps, or a per-layer CKA profile")
    _add_config_flags(p)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pair", nargs=2, type=Path, metavar=("X", "Y"), help="two activation dumps")
    mode.add_argument("--global-ckpt", type=Path, help="global checkpoint for a profile")
    p.add_argument("--locals", nargs="+", type=Path, default=[], help="client checkpoints for a profile")
    p.add_argument("--profile-batch", type=int, default=250)

    p = sub.add_parser("sweep-layers", help="accuracy against the number of regularized layers")
    _add_config_flags(p)
    p.add_argument("--m-values", nargs="+", type=int, default=list(range(1, 8)))
    p.add_argument("--seeds", nargs="+", type=int)

    p = sub.add_parser("ablate-metric", help="FedAvg plus FedCKA under each similarity metric")
    _add_config_flags(p)
    p.add_argument("--metrics", nargs="+", choices=SIMILARITY_METRICS, default=list(SIMILARITY_METRICS))
    p.add_argument("--seeds", nargs="+", type=int)

    p = sub.add_parser("bench", help="round time per method at two model depths")
    _add_config_flags(p)
    p.add_argument("--depths", nargs="+", choices=("shallow", "deep"), default=["shallow", "deep"])
    p.add_argument("--methods", nargs="+", choices=BENCH_METHODS, default=list(BENCH_METHODS))
    p.add_argument("--repetitions", type=int, default=3)
    return parser


# -- commands ----------------------------------------------------------------------


def cmd_partition(args, cfg: ExperimentConfig) -> None:
    part = run_partition(cfg)
    print(f"{part.n_clients} clients, sizes {part.sizes().tolist()} -> {cfg.output_dir}")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    res = run_train(cfg, save_clients=args.save_clients)
    s = res.summary
    print(f"final accuracy {s['final_accuracy']:.4f}, best {s['best_accuracy']:.4f} "
          f"(round {s['best_round']}) -> {cfg.output_dir}")


def cmd_similarity(args, cfg: ExperimentConfig) -> None:
    if args.pair:
        x, y = (read_activation_dump(p) for p in args.pair)
        values = all_metrics(x, y, cfg.bandwidth_multiplier)
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in values.items():
            w.writerow([name, repr(v)])
        return
    if not args.locals:
        raise ConfigError("--global-ckpt needs at least one --locals checkpoint")
    g = load_checkpoint(args.global_ckpt)
    locals_ = [load_checkpoint(p) for p in args.locals]
    _, test = load_data(cfg)
    profile = similarity_profile(g, locals_, test, batch_size=args.profile_batch)
    out = ensure_writable_dir(cfg.output_dir) / "similarity_profile.csv"
    write_profile_csv(profile, out, cfg)
    print(f"{profile.shape[0]} layers x {profile.shape[1]} clients -> {out}")


def cmd_sweep_layers(args, cfg: ExperimentConfig) -> None:
    out = ensure_writable_dir(cfg.output_dir) / "layer_sweep.csv"
    rows = layer_sweep(cfg, args.m_values, args.seeds)
    write_rows(out, SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows], cfg)
    print(f"{len(rows)} runs -> {out}")


def cmd_ablate_metric(args, cfg: ExperimentConfig) -> None:
    out = ensure_writable_dir(cfg.output_dir) / "metric_ablation.csv"
    rows = metric_ablation(cfg, args.metrics, args.seeds)
    write_rows(out, ABLATION_COLUMNS, [[r[c] for c in ABLATION_COLUMNS] for r in rows], cfg)
    print(f"{len(rows)} runs -> {out}")


def cmd_bench(args, cfg: ExperimentConfig) -> None:
    if "none" not in args.methods:
        raise ConfigError("bench needs the 'none' method as its baseline")
    out = ensure_writable_dir(cfg.output_dir) / "bench.csv"
    res = bench(cfg, args.depths, args.methods, args.repetitions)
    write_rows(out, BENCH_COLUMNS, [[r[c] for c in BENCH_COLUMNS] for r in res.rows], cfg)
    for r in res.rows:
        print(f"{r['depth']:>8} {r['method']:>9} {r['median_round_ms']:10.1f} ms  x{r['overhead_vs_fedavg']:.3f}")
    if set(args.depths) == {"shallow", "deep"}:
        for m in args.methods:
            print(f"overhead growth deep/shallow {m}: {res.growth(m):.3f}")


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "similarity": cmd_similarity,
    "sweep-layers": cmd_sweep_layers,
    "ablate-metric": cmd_ablate_metric,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FedCKAError, ArithmeticError, ValueError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
