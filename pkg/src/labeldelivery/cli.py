"""Command-line entry point: ``labeldelivery <subcommand> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .data import read_dataset, write_dataset
from .errors import LabelDeliveryError
from .harness.config import config_text, load_config
from .harness.experiments import build_dataset, prop1_breaches, run_experiment
from .harness.report import (
    emit_report,
    read_results_csv,
    regenerate,
    stats_table,
    stats_text,
    summary_text,
    write_stats_csv,
)
from .nnet import load_checkpoint, save_checkpoint
from .ood import SCORE_TYPES, fit_knn_index, ood_table
from .train import write_history_csv, train_run

log = logging.getLogger("labeldelivery")

EXPERIMENT_COMMANDS = {
    "main": "main",
    "family": "family",
    "sweep": "sweep",
    "probe": "resample_probe",
    "geometry": "geometry",
    "ood": "ood",
    "prop1-check": "prop1",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--output-root", help="output root (default: $LABELDELIVERY_OUTPUT_ROOT, then config, then ./results)")
    p.add_argument("--seeds", help="comma-separated seeds (experiment.seeds)")
    p.add_argument("--methods", help="comma-separated methods (experiment.methods)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--workers", type=int, help="experiment.workers")
    p.add_argument("--plots", action="store_true", help="also render PNG figures")


def _flag_overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.seeds:
        out.append(f"experiment.seeds={args.seeds}")
    if args.methods:
        out.append(f"experiment.methods={args.methods}")
    if args.epochs is not None:
        out.append(f"train.epochs={args.epochs}")
    if args.workers is not None:
        out.append(f"experiment.workers={args.workers}")
    if args.plots:
        out.append("experiment.plots=true")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labeldelivery", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic task and write it as text")
    _common(p)
    p.add_argument("--out", help="dataset path (default <root>/data/dataset.txt)")

    p = sub.add_parser("train", help="train one run; write its history CSV and best checkpoint")
    _common(p)
    p.add_argument("--method", help="delivery.method")
    p.add_argument("--seed", type=int, help="train.seed")

    for name in ("main", "family", "sweep", "probe", "geometry", "prop1-check"):
        p = sub.add_parser(name, help=f"run the {EXPERIMENT_COMMANDS[name]} experiment")
        _common(p)

    p = sub.add_parser("ood", help="OOD AUROC: the ood experiment, or one checkpoint against given datasets")
    _common(p)
    p.add_argument("--checkpoint", help="score this checkpoint instead of running the experiment")
    p.add_argument("--in-data", help="in-distribution dataset file")
    p.add_argument("--out-data", action="append", default=[], help="OOD dataset file (repeatable)")
    p.add_argument("--train-data", help="training dataset file for the knn index")
    p.add_argument("--scores", default=",".join(SCORE_TYPES), help="comma-separated score types")
    p.add_argument("--csv", help="output CSV (default <root>/ood/auroc.csv)")

    p = sub.add_parser("stats", help="paired Wilcoxon tables from a results CSV")
    p.add_argument("results", help="results.csv written by an experiment")
    p.add_argument("--experiment", help="experiment name (default: the only one in the file)")
    p.add_argument("--metric", default="soft_nll")
    p.add_argument("--reference", default="soft")
    p.add_argument("--out", help="stats CSV path (default next to the results)")

    p = sub.add_parser("report", help="regenerate summary (and figures) from a results directory")
    p.add_argument("directory")
    p.add_argument("--plots", action="store_true")
    return parser


def _cfg(args, kind=None):
    return load_config(args.config, _flag_overrides(args), kind=kind)


def _outdir(cfg, args) -> Path:
    out = cfg.output_dir(args.output_root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _cfg(args)
    path = Path(args.out) if args.out else cfg.output_dir(args.output_root).parent / "data" / "dataset.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(build_dataset(cfg), path)
    print(path)
    return 0


def cmd_train(args) -> int:
    extra = []
    if args.method:
        extra.append(f"delivery.method={args.method}")
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    args.overrides = list(args.overrides) + extra
    cfg = _cfg(args)
    out = cfg.output_dir(args.output_root).parent / "train"
    out.mkdir(parents=True, exist_ok=True)
    rec = train_run(build_dataset(cfg), cfg.train)
    stem = f"{cfg.train.method}_seed{cfg.train.seed}"
    write_history_csv(rec, out / f"{stem}_history.csv")
    save_checkpoint(rec.best_model(), out / f"{stem}_best.ckpt")
    save_checkpoint(rec.final_model(), out / f"{stem}_final.ckpt")
    print(f"best epoch {rec.best_epoch}: eval soft NLL {rec.best_eval_soft_nll:.4f}")
    if rec.fault:
        print(f"fault: {rec.fault}", file=sys.stderr)
        return 1
    return 0


def cmd_experiment(args) -> int:
    kind = EXPERIMENT_COMMANDS[args.command]
    cfg = _cfg(args, kind=kind)
    out = _outdir(cfg, args)
    (out / "config.ini").write_text(config_text(cfg))
    table = run_experiment(cfg)
    files = emit_report(table, out, plots=cfg.plots)
    print(summary_text(table))
    for name, path in sorted(files.items()):
        print(f"{name}: {path}")
    if table.errors:
        print(f"{len(table.errors)} cell(s) failed; see {files['errors']}", file=sys.stderr)
    if kind == "prop1":
        breaches = prop1_breaches(table, cfg)
        for b in breaches:
            print(f"BREACH {b}", file=sys.stderr)
        return 1 if breaches else 0
    return 1 if table.errors else 0


def cmd_ood(args) -> int:
    if not args.checkpoint:
        return cmd_experiment(args)
    if not args.in_data or not args.out_data:
        raise LabelDeliveryError("--checkpoint needs --in-data and at least one --out-data")
    cfg = _cfg(args, kind="ood")
    model = load_checkpoint(args.checkpoint)
    scores = tuple(s.strip() for s in args.scores.split(",") if s.strip())
    index = fit_knn_index(model, read_dataset(args.train_data).X) if args.train_data else None
    if "knn" in scores and index is None:
        raise LabelDeliveryError("knn needs --train-data to build the feature index")
    o = cfg.ood
    params = {"energy_T": o.energy_T, "odin_T": o.odin_T, "odin_eps": o.odin_eps, "knn_k": o.knn_k}
    X_in = read_dataset(args.in_data).X
    path = Path(args.csv) if args.csv else _outdir(cfg, args) / "auroc.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("out_set", "score", "auroc"))
        for out_path in args.out_data:
            res = ood_table(model, X_in, read_dataset(out_path).X, scores, params, index)
            for st in scores:
                w.writerow((Path(out_path).name, st, repr(res[st])))
                print(f"{Path(out_path).name:<24} {st:<8} {res[st]:.4f}")
    print(path)
    return 0


def cmd_stats(args) -> int:
    table = read_results_csv(args.results)
    exps = sorted({r.experiment for r in table.rows})
    exp = args.experiment or (exps[0] if len(exps) == 1 else None)
    if exp is None:
        raise LabelDeliveryError(f"results hold several experiments {exps}; pass --experiment")
    cells = stats_table(table, exp, args.metric, args.reference)
    out = Path(args.out) if args.out else Path(args.results).with_name(f"stats_{exp}_{args.metric}.csv")
    write_stats_csv(cells, out)
    print(stats_text(cells), end="")
    print(out)
    return 0


def cmd_report(args) -> int:
    files = regenerate(args.directory, plots=args.plots)
    print(Path(files["summary"]).read_text())
    for name, path in sorted(files.items()):
        print(f"{name}: {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "ood": cmd_ood, "stats": cmd_stats, "report": cmd_report}
    try:
        return handlers.get(args.command, cmd_experiment)(args)
    except LabelDeliveryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
