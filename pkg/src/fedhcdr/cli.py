"""Command line entry point: ``fedhcdr run | synth | eval-only``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import checkpoint
from .config import VARIANTS, ConfigError, RunConfig, apply_values, dump_config, load_config
from .dataset import DatasetError, load_scenario
from .federation import Federation, TrainingError, run_training
from .synthetic import generate_synthetic

log = logging.getLogger("fedhcdr")

OUT_ENV = "FEDHCDR_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

CONFIG_FILE = "config.resolved.ini"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
SEED_FILE = "seed.txt"
CKPT_DIR = "checkpoints"
METRIC_COLUMNS = ["scenario", "domain", "split", "MRR", "HR@10", "NDCG@10", "n_users_evaluated", "seed"]


def _flag_values(args) -> dict:
    vals = {}
    for key, attr in (("seed", "seed"), ("variant", "variant"), ("rounds", "rounds"), ("lambda", "lam"),
                      ("gamma", "gamma"), ("p_drop", "p_drop"), ("out", "out")):
        v = getattr(args, attr, None)
        if v is not None:
            vals[key] = str(v)
    return vals


def build_config(args) -> RunConfig:
    """Config file values, then command line flags, then variant presets."""
    cfg = load_config(args.config) if args.config else RunConfig()
    errs: List[str] = []
    apply_values(cfg, _flag_values(args), errs)
    if errs:
        raise ConfigError(errs)
    return cfg.resolved()


def run_dir_for(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.name}_{cfg.variant}_seed{cfg.train.seed}"


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_history(path, history):
    if not history:
        return
    cols = list(history[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([_fmt(row[c]) for c in cols])


def metric_rows(scenario_name, clients, seed, splits=("valid", "test")):
    rows = []
    for split in splits:
        for c in clients:
            res = c.evaluate(split)
            rows.append([scenario_name, c.name, split, res.mrr, res.hr, res.ndcg, res.n_users, seed])
    return rows


def write_metrics(path, rows):
    # metric values are fractions in [0, 1], not percentages
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic is not None:
        # the snapshot must point at the data actually used
        cfg.domains = generate_synthetic(cfg.synthetic, out / "data")
        cfg.synthetic = None
    scenario = load_scenario(cfg.domains, cfg.min_user_inter, cfg.min_item_inter, name=cfg.name,
                             seed=cfg.train.seed)
    (out / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")
    (out / SEED_FILE).write_text(f"{cfg.train.seed}\n", encoding="utf-8")
    log.info("scenario %s: %d users, domains %s", scenario.name, scenario.n_users,
             [(d.name, d.n_items, len(d.train_edges)) for d in scenario.domains])
    result = run_training(scenario, cfg.train)
    write_history(out / HISTORY_FILE, result.history)
    checkpoint.save_run(out / CKPT_DIR, result.clients, result.server)
    write_metrics(out / METRICS_FILE, metric_rows(scenario.name, result.clients, cfg.train.seed))
    print(f"run finished after {result.rounds_run} rounds (best round {result.best_round}); artifacts in {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    errs: List[str] = []
    if args.seed is not None:
        apply_values(cfg, {"synthetic_seed": str(args.seed)}, errs)
    if errs:
        raise ConfigError(errs)
    spec = cfg.synthetic
    if spec is None:
        from .synthetic import SyntheticSpec
        spec = SyntheticSpec()
    errs = spec.errors()
    if errs:
        raise ConfigError(errs)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / f"synthetic_seed{spec.seed}"
    manifest = generate_synthetic(spec, out)
    lines = ["[domains]"] + [f"{tag} = {p.name}" for tag, p in manifest.items()]
    (out / "manifest.ini").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(manifest)} domain files to {out}")
    return EXIT_OK


def cmd_eval_only(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / CONFIG_FILE).resolved()
    scenario = load_scenario(cfg.domains, cfg.min_user_inter, cfg.min_item_inter, name=cfg.name,
                             seed=cfg.train.seed)
    fed = Federation(scenario, cfg.train)
    checkpoint.load_run(run_dir / CKPT_DIR, fed.clients, fed.server)
    out = Path(args.out) if args.out else run_dir / "metrics_eval.csv"
    write_metrics(out, metric_rows(scenario.name, fed.clients, cfg.train.seed))
    print(f"metrics written to {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedhcdr", description="Federated cross-domain recommendation simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    run.add_argument("--config")
    run.add_argument("--seed", type=int)
    run.add_argument("--variant", choices=VARIANTS)
    run.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./runs, plus a run name)")
    run.add_argument("--rounds", type=int)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--p-drop", dest="p_drop", type=float)
    run.set_defaults(func=cmd_run)

    syn = sub.add_parser("synth", help="write a synthetic scenario as TSV files")
    syn.add_argument("--config")
    syn.add_argument("--seed", type=int)
    syn.add_argument("--out")
    syn.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval-only", help="re-evaluate the checkpoints of a finished run")
    ev.add_argument("run_dir")
    ev.add_argument("--out", help="metrics CSV path (default: <run_dir>/metrics_eval.csv)")
    ev.set_defaults(func=cmd_eval_only)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, DatasetError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
