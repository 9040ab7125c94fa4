"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from trpoppo.env import DataError, load_dataset, synthesize_dataset, write_dataset
from trpoppo.metrics import render_table
from trpoppo.trainer import (
    DISPLAY_NAME,
    SECTIONS,
    ConfigError,
    NumericalFailure,
    RunConfig,
    config_from_mapping,
    emit_report,
    eval_seed,
    evaluate,
    load_config,
    make_dataset,
    read_runlog,
    run_training,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _flag(section: str, name: str) -> str:
    name = name.replace("_", "-")
    return f"--{name}" if section == "run" else f"--{section.replace('_', '-')}.{name}"


def _config_fields():
    defaults = RunConfig()
    for f in dataclasses.fields(RunConfig):
        if f.name in SECTIONS:
            sub = getattr(defaults, f.name)
            for g in dataclasses.fields(sub):
                yield f.name, g.name, getattr(sub, g.name)
        else:
            yield "run", f.name, getattr(defaults, f.name)


def add_config_flags(parser: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    """One flag per config key, e.g. --total-timesteps or --trust-region.delta."""
    parser.add_argument("--config", help="INI config file; flags given here override it")
    group = parser.add_argument_group("config keys")
    for section, name, default in _config_fields():
        if name in skip and section == "run":
            continue
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(_flag(section, name), dest=f"cfg:{section}:{name}", metavar="V", help=f"default: {shown}")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    values: Dict[str, Dict[str, str]] = {}
    for key, raw in vars(args).items():
        if key.startswith("cfg:") and raw is not None:
            _, section, name = key.split(":")
            values.setdefault(section, {})[name] = raw
    return config_from_mapping(values, base)


def _print_progress(rec: dict) -> None:
    step = rec.get("natural_step")
    extra = ""
    if step is not None:
        extra = f" kl={step['kl_after']:.4g} backtracks={step['backtracks_used']}" if step["accepted"] else f" skipped={step['skipped']}"
    reward = rec["mean_episode_reward"]
    shown = "n/a" if reward is None else f"{reward:.4f}"
    print(f"iter {rec['iteration']:4d}  t={rec['timestep']:7d}  phase={rec['phase']}  reward={shown}{extra}", flush=True)


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    if not config.output_dir:
        raise ConfigError("train needs --output-dir")
    result = run_training(config, None if args.quiet else _print_progress)
    if result.log.halted:
        raise NumericalFailure(f"training halted: {result.log.records[-1].get('flag')}; last good checkpoint kept")
    if "TEST" in result.log.final:
        _, _, table = emit_report([result.log])
        print(table, end="")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt.parent / "config.ini").exists():
        args.config = str(ckpt.parent / "config.ini")
    config = config_from_args(args)
    report = evaluate(ckpt, make_dataset(config), args.split, config.env, args.eval_seed if args.eval_seed is not None else eval_seed(config))
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(render_table([(DISPLAY_NAME[config.variant], config.modality, report)]), end="")
    return EXIT_OK


def _find_runlogs(paths: Sequence[str]) -> List[Path]:
    found: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("runlog.jsonl")))
        else:
            found.append(p)
    if not found:
        raise ConfigError("no run logs found")
    return found


def cmd_report(args: argparse.Namespace) -> int:
    logs = []
    for path in _find_runlogs(args.runs):
        try:
            logs.append(read_runlog(path))
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    _, csv, table = emit_report(logs, args.split)
    print(table, end="")
    if args.csv:
        Path(args.csv).write_text(csv)
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.output)
    if args.modality.upper() == "JOINT":
        out.mkdir(parents=True, exist_ok=True)
        rna = synthesize_dataset(args.seed, args.cells, args.genes, args.density, "RNA", args.test_fraction)
        atac = synthesize_dataset(args.seed + 1, args.cells, args.genes, args.density, "ATAC", args.test_fraction)
        # both files must agree on split and pseudotime per cell
        atac = dataclasses.replace(atac, split=rna.split, pseudotime=rna.pseudotime)
        write_dataset(out / "rna.csv", rna)
        write_dataset(out / "atac.csv", atac)
        print(f"wrote {out / 'rna.csv'} and {out / 'atac.csv'}")
    else:
        ds = synthesize_dataset(args.seed, args.cells, args.genes, args.density, args.modality, args.test_fraction)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(out, ds)
        print(f"wrote {out} ({ds.n_cells} cells x {ds.n_genes} features)")
    return EXIT_OK


def cmd_validate_data(args: argparse.Namespace) -> int:
    ds = load_dataset(args.path[0] if len(args.path) == 1 else tuple(args.path), args.modality)
    n_train, n_test = ds.cells_in("TRAIN").size, ds.cells_in("TEST").size
    grn = "yes" if ds.regulatory is not None else "no"
    print(f"ok: {ds.modality} {ds.n_cells} cells ({n_train} TRAIN, {n_test} TEST) x {ds.n_genes} features; regulatory matrix: {grn}")
    return EXIT_OK


def _sweep_one(config: RunConfig) -> str:
    result = run_training(config)
    return f"{config.variant} seed={config.seed}: final reward {result.log.final_episode_reward:.4f}" + (
        " (halted)" if result.log.halted else ""
    )


def cmd_sweep(args: argparse.Namespace) -> int:
    base = config_from_args(args)
    if not base.output_dir:
        raise ConfigError("sweep needs --output-dir")
    root = Path(base.output_dir)
    configs = [
        base.replace(seed=seed, variant=variant, output_dir=str(root / f"{variant}_seed{seed}"))
        for variant in args.variants
        for seed in args.seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            lines = list(pool.map(_sweep_one, configs))
    else:
        lines = [_sweep_one(c) for c in configs]
    for line in lines:
        print(line)
    logs = [read_runlog(Path(c.output_dir) / "runlog.jsonl") for c in configs]
    _, csv, table = emit_report(logs)
    (root / "report.csv").write_text(csv)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trpoppo", description="Trust-region warm-started PPO on a simulated perturbation environment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    add_config_flags(p)
    p.add_argument("--quiet", action="store_true", help="no per-iteration progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint with the deterministic policy")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="TEST", choices=("TRAIN", "TEST"))
    p.add_argument("--eval-seed", type=int, default=None, help="perturbation seed (default: the training run's evaluation seed)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="comparison table from run logs or run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--split", default="TEST", choices=("TRAIN", "TEST"))
    p.add_argument("--csv", help="also write the table as CSV here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (and its regulatory matrix)")
    p.add_argument("output", help="file path, or a directory for JOINT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cells", type=int, default=400)
    p.add_argument("--genes", type=int, default=32)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--modality", default="RNA", choices=("RNA", "ATAC", "JOINT"))
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("validate-data", help="check a dataset file against the format")
    p.add_argument("path", nargs="+", help="one file or directory; two files (rna, atac) for JOINT")
    p.add_argument("--modality", default="RNA", choices=("RNA", "ATAC", "JOINT"))
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("sweep", help="train every (variant, seed) pair in separate processes, then report")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=["PPO_ONLY", "TRPO_PPO"], choices=("PPO_ONLY", "TRPO_PPO"))
    p.add_argument("--jobs", type=int, default=1)
    add_config_flags(p, skip=("seed", "variant"))
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
