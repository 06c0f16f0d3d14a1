"""``fedseg`` command line: run, detect, compare, eval."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import CheckpointError, FedSegError
from .experiment import cmd_compare, cmd_detect, cmd_eval, cmd_run, dump_config, load_config
from .experiment.config import ExperimentConfig


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedseg", description="Federated attention U-Net segmentation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="generate data, train, evaluate and compare")
    r.add_argument("--config", help="key = value config file (defaults when omitted)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", help="override the output directory")
    r.add_argument("--print-defaults", action="store_true", help="print every config key with its default and exit")

    d = sub.add_parser("detect", help="flag faulty clients from FL training losses")
    d.add_argument("--run", required=True, help="run directory")
    d.add_argument("--delta-abs", type=float)
    d.add_argument("--delta-rel", type=float)
    d.add_argument("--k", type=int, dest="k_consecutive")
    d.add_argument("--warmup", type=int, dest="warmup_epochs")

    c = sub.add_parser("compare", help="Wilcoxon tables within a run or across runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", help="directory for the tables (default: <first run>/compare)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory with manifest.json")
    e.add_argument("--split", help="test, or client<k>.train / client<k>.val")
    e.add_argument("--out", help="per-image metric CSV")
    e.add_argument("--threshold", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 10 + e.code
    except (FedSegError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "run":
        if args.print_defaults:
            sys.stdout.write(dump_config(ExperimentConfig()))
            return 0
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        manifest = cmd_run(cfg, args.out)
        out = args.out or cfg.out
        for config_id, c in manifest["configurations"].items():
            print(f"{config_id}: {len(c['models'])} models -> {out}/{c['summary']}")
        print(f"manifest: {out}/manifest.json")
    elif args.command == "detect":
        reports = cmd_detect(args.run, args.delta_abs, args.delta_rel, args.k_consecutive, args.warmup_epochs)
        for config_id, rep in reports.items():
            print(f"{config_id}: flagged {rep.flagged}")
    elif args.command == "compare":
        comps, alpha = cmd_compare(args.runs, args.out)
        n_sig = sum(r.significant for c in comps for r in c.results.values())
        print(f"{len(comps)} comparisons, corrected alpha {alpha:.3g}, {n_sig} significant metric tests")
    elif args.command == "eval":
        _, summary = cmd_eval(args.checkpoint, args.data, args.out, args.split, args.threshold)
        for m in ("dice", "iou", "hd", "hd95", "assd"):
            s = summary[m]
            print(f"{m:5s} median {s['median']:.4f}  iqr {s['iqr']:.4f}  n {s['n']}")
        print(f"undefined distance metrics: {summary['undefined']}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
