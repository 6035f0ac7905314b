"""Command-line entry point.

    fedgcdr [global flags] synth | prepare | train | evaluate | attack | cost-report

Validation failures exit with status 2 and a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from . import gatmodel as gm
from .config import ConfigError, RunConfig, load_config
from .costledger import LedgerError, predict_communication, predict_computation
from .dataset import (
    DataError,
    SplitPair,
    UserRegistry,
    eval_negatives,
    filter_min_interactions,
    leave_one_out_split,
    load_domain_ratings,
    read_split_csv,
    synth_generate,
    to_implicit,
    write_domain_csv,
    write_registry,
    write_split_csv,
)
from .evalkit import EvalError, evaluate
from .federation import MODES, FederatedData, PipelineError, build_cost_model, run_pipeline
from .graph import GraphError
from .privacy import AttackConfig, AttackError, attack_grid, random_scenario, write_sweep_csv
from .transfer import TransferError

log = logging.getLogger("fedgcdr")

VALIDATION_ERRORS = (
    ConfigError, DataError, PipelineError, gm.ModelError, TransferError, AttackError, LedgerError,
    EvalError, GraphError, FileNotFoundError,
)
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "run_config": cfg.to_dict(), **extra}


# ------------------------------------------------------------- data dirs

def _domain_files(directory: Path) -> list[tuple[int, Path]]:
    found = sorted(directory.glob("domain_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not found:
        raise FileNotFoundError(f"no domain_<id>.csv files in {directory}")
    return [(int(p.stem.split("_")[1]), p) for p in found]


def load_prepared(directory) -> FederatedData:
    directory = Path(directory)
    reg_path, items_path = directory / "registry.json", directory / "items.json"
    for p in (reg_path, items_path):
        if not p.is_file():
            raise FileNotFoundError(f"prepared data is missing {p}")
    registry = UserRegistry.from_json(json.loads(reg_path.read_text(encoding="utf-8")))
    items = json.loads(items_path.read_text(encoding="utf-8"))
    splits: dict[int, SplitPair] = {}
    for d in registry.domains():
        splits[d] = read_split_csv(directory / f"split_{d}.csv", d, registry, items[str(d)])
    return FederatedData(splits, registry)


def write_prepared(data: FederatedData, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for d in data.domain_ids:
        write_split_csv(data.splits[d], data.registry, directory / f"split_{d}.csv")
    write_registry(data.registry, directory / "registry.json")
    items = {str(d): list(data.splits[d].train.item_ids) for d in data.domain_ids}
    _write_json(directory / "items.json", items)


# --------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sd = synth_generate(cfg.synth)
    for iset in sd.domains:
        write_domain_csv(iset, sd.registry, out / f"domain_{iset.domain_id}.csv")
    densities = {str(i.domain_id): i.density for i in sd.domains}
    _write_json(out / "manifest.json", _manifest(cfg, "synth", densities=densities))
    log.info("wrote %d domains to %s", len(sd.domains), out)
    return 0


def cmd_prepare(cfg: RunConfig, args) -> int:
    if args.inputs:
        files = list(enumerate(Path(p) for p in args.inputs))
    elif args.input_dir:
        files = _domain_files(Path(args.input_dir))
    else:
        raise UsageError("prepare needs input files or --input-dir")
    registry = UserRegistry()
    splits = {}
    for d, path in files:
        records = load_domain_ratings(path, d, strict=cfg.data.strict)
        records = filter_min_interactions(records, cfg.data.min_interactions)
        if not records:
            raise DataError(f"{path}: no interactions left after filtering")
        splits[d] = leave_one_out_split(to_implicit(records, registry, d))
    data = FederatedData(splits, registry)
    out = Path(cfg.out)
    write_prepared(data, out)
    stats = {str(d): {"users": s.train.n_users, "items": s.train.n_items, "train": len(s.train),
                      "test": len(s.test_users)} for d, s in splits.items()}
    _write_json(out / "manifest.json", _manifest(cfg, "prepare", inputs=[str(p) for _, p in files], domains=stats))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data = load_prepared(args.data)
    result = run_pipeline(cfg.pipeline, data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result.metrics.write_json(out / "metrics.json")
    result.ledger.write_csv(out / "ledger.csv")
    gm.save_checkpoint(out / "target.npz", result.target.params, result.target.mappers)
    for s in result.sources:
        gm.save_checkpoint(out / f"source_{s.domain_id}.npz", s.params)
    users, items = result.scores()
    with (out / "embeddings.npz").open("wb") as fh:
        np.savez(fh, users=users, items=items)
    manifest = _manifest(cfg, "train", **result.manifest())
    manifest["ledger_totals"] = result.ledger.totals
    _write_json(out / "manifest.json", manifest)
    log.info("HR@%s", {k: round(v, 4) for k, v in result.metrics.hr.items()})
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    data = load_prepared(args.data)
    target = cfg.pipeline.target_domain
    if target not in data.splits:
        raise PipelineError(f"target domain {target} not in {data.domain_ids}")
    path = Path(args.embeddings)
    if not path.is_file():
        raise FileNotFoundError(f"embeddings file not found: {path}")
    with np.load(path) as z:
        users, items = z["users"], z["items"]
    split = data.splits[target]
    if users.shape[0] != split.train.n_users or items.shape[0] != split.train.n_items:
        raise EvalError("embedding tables do not match the target domain's users and items")
    ks = tuple(args.ks) if args.ks else cfg.pipeline.ks
    negs = eval_negatives(split, cfg.pipeline.eval_negatives, cfg.seed)
    report = evaluate(users, items, split, negs, ks, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    if args.ranks:
        report.write_ranks(out / "ranks.csv")
    return 0


def cmd_attack(cfg: RunConfig, args) -> int:
    a = cfg.attack
    epsilons = tuple(args.epsilons) if args.epsilons else a.epsilons
    if not epsilons:
        raise UsageError("at least one epsilon is required")
    scenario = random_scenario(a.n_users, a.n_items, a.degree, a.dim, a.n_layers, cfg.seed)
    attack = AttackConfig(a.step_size, a.iterations, a.restarts, a.init_std)
    seeds = tuple(cfg.seed + s for s in a.seeds)
    rows = attack_grid(epsilons, scenario, seeds, a.delta, a.clip_norm, attack)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "leakage_sweep.csv")
    _write_json(out / "manifest.json", _manifest(cfg, "attack", cells=len(rows)))
    return 0


def read_ledger_totals(path) -> dict[str, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"ledger file not found: {path}")
    totals: Counter[str] = Counter({s: 0 for s in ("1", "2", "3-train", "3-finetune")})
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            totals[row["stage"]] += int(row["scalar_count"])
    out = dict(totals)
    out["total"] = sum(totals.values())
    return out


def cmd_cost_report(cfg: RunConfig, args) -> int:
    if cfg.pipeline.sparse_uploads:
        raise LedgerError(
            "cost report refused: sparse uploads send only touched item rows, so the closed-form "
            "dense count does not apply"
        )
    data = load_prepared(args.data)
    pipeline = cfg.pipeline
    if len(data.domain_ids) == 1:
        pipeline = dataclasses.replace(pipeline, mode="single-domain")
    n_mappers = len(data.domain_ids) - 1 if pipeline.mode in ("full", "ablate-M") else 0
    cost = build_cost_model(pipeline, data, n_mappers, pipeline.uses_finetune)
    predicted = predict_communication(cost)
    report = {"predicted": predicted, "computation": predict_computation(cost)}
    if args.ledger:
        measured = read_ledger_totals(args.ledger)
        report["measured"] = measured
        report["exact_match"] = measured == predicted
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "cost_report.json", report)
    return 0


# ------------------------------------------------------------------ parser

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="TOML run configuration")
    parser.add_argument("--seed", type=int, metavar="U64", default=default, help="root random seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--threads", type=int, metavar="N", default=default, help="worker cap (runs are single-threaded)")
    parser.add_argument("--mode", choices=MODES, default=default, help="pipeline variant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgcdr", description="Federated graph cross-domain recommendation simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain dataset")

    p = sub.add_parser("prepare", parents=[common], help="split rating files into train/test")
    p.add_argument("inputs", nargs="*", help="rating CSVs; domain ids follow argument order")
    p.add_argument("--input-dir", help="directory of domain_<id>.csv files")

    p = sub.add_parser("train", parents=[common], help="run the three-stage pipeline")
    p.add_argument("--data", required=True, help="prepared data directory")

    p = sub.add_parser("evaluate", parents=[common], help="score saved embeddings")
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--embeddings", required=True, help="embeddings.npz written by train")
    p.add_argument("--ks", type=int, nargs="+", help="cut-offs (default from config)")
    p.add_argument("--ranks", action="store_true", help="also write per-user ranks")

    p = sub.add_parser("attack", parents=[common], help="inversion-attack leakage sweep")
    p.add_argument("--epsilons", type=float, nargs="+", help="privacy budgets (default from config)")

    p = sub.add_parser("cost-report", parents=[common], help="predicted vs measured communication")
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--ledger", help="ledger.csv written by train")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "cost-report": cmd_cost_report,
}


def _setup_logging() -> None:
    level = os.environ.get("FEDGCDR_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"FEDGCDR_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, out=args.out, threads=args.threads, mode=args.mode
        )
        return COMMANDS[args.command](cfg, args)
    except (*VALIDATION_ERRORS, UsageError) as exc:
        print(f"fedgcdr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
