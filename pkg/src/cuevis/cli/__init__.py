"""``cuevis`` command line: dataset, estimator, field pretraining, cue training, evaluation."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from cuevis.cli.config import SEED_MAX, ConfigError, resolve_config
from cuevis.cli import pipeline
from cuevis.cues.trainer import ENCODING, SUPERVISION

COMMANDS = ("dataset", "train-estimator", "pretrain-nerf", "train-cues", "eval", "ablate", "report")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {v}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _csv_list(kind=str):
    def parse(text: str):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return [kind(s) for s in items]

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file overriding the defaults")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--seed", type=_seed, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads for rendering")
    common.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. cue_train.total_steps=200")
    common.add_argument("--quiet", action="store_true", help="no progress lines")

    p = argparse.ArgumentParser(prog="cuevis", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", parents=[common], help="ray-trace a labelled dataset")
    d.add_argument("--n", "--n-images", dest="n_images", type=_positive)

    e = sub.add_parser("train-estimator", parents=[common], help="train a pose estimator")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--heads", choices=("heatmap+pose", "pose-only"))

    sub.add_parser("pretrain-nerf", parents=[common], help="photometric pretraining of the generator")

    c = sub.add_parser("train-cues", parents=[common], help="train the generator through a frozen estimator")
    c.add_argument("--dataset", type=Path, required=True)
    c.add_argument("--estimator", type=Path, required=True, help="estimator checkpoint")
    c.add_argument("--generator", type=Path, required=True, help="pretrained generator checkpoint")
    c.add_argument("--supervision", choices=SUPERVISION)
    c.add_argument("--encoding", choices=ENCODING)

    v = sub.add_parser("eval", parents=[common], help="estimator errors on cue renders vs reference images")
    v.add_argument("--estimator", type=Path, required=True)
    v.add_argument("--generator", type=Path, required=True)
    v.add_argument("--poses", help="grid32, or a dataset split (val/test) together with --dataset")
    v.add_argument("--dataset", type=Path)

    a = sub.add_parser("ablate", parents=[common], help="run every arm of an ablation grid")
    a.add_argument("--estimators", type=_csv_list(), default=["heatmap+pose", "pose-only"])
    a.add_argument("--modes", type=_csv_list(), default=["combined"])
    a.add_argument("--encodings", type=_csv_list(), default=["frozen"])
    a.add_argument("--seeds", type=_csv_list(int), default=[0])

    r = sub.add_parser("report", help="tabulate finished runs")
    r.add_argument("runs", nargs="+", type=Path, help="run directories")
    r.add_argument("--out", type=Path, required=True)
    return p


def _check_choices(args, parser) -> None:
    if args.command != "ablate":
        return
    allowed = {
        "estimators": ("heatmap+pose", "pose-only"),
        "modes": SUPERVISION,
        "encodings": ENCODING,
    }
    for name, ok in allowed.items():
        bad = [x for x in getattr(args, name) if x not in ok]
        if bad:
            parser.error(f"--{name}: unknown value(s) {', '.join(bad)}; choose from {', '.join(ok)}")
    for s in args.seeds:
        if not 0 <= s <= SEED_MAX:
            parser.error(f"--seeds: {s} is not an unsigned 64-bit integer")


def run(args) -> Path:
    log = (lambda *a: None) if getattr(args, "quiet", False) else (lambda msg: print(msg, flush=True))
    if args.command == "report":
        res = pipeline.report_tables(args.runs, args.out)
        for s in res["skipped"]:
            print(f"skipped {s}", file=sys.stderr)
        if not res["rows"]:
            raise ValueError("no run directory had evaluation logs")
        return res["md"]

    extra = []
    if args.command == "train-estimator" and args.heads:
        extra.append(f'estimator.heads="{args.heads}"')
    if args.command == "train-cues":
        if args.supervision:
            extra.append(f'cue_train.supervision="{args.supervision}"')
        if args.encoding:
            extra.append(f'cue_train.encoding="{args.encoding}"')
    if args.command == "eval" and args.poses:
        extra.append(f'eval.poses="{args.poses}"')
    cfg = resolve_config(args.config, list(args.assignments) + extra, args.seed)

    if args.command == "dataset":
        return pipeline.run_dataset(cfg, args.out, args.threads, args.n_images)
    if args.command == "train-estimator":
        return pipeline.run_train_estimator(cfg, args.dataset, args.out, log)
    if args.command == "pretrain-nerf":
        return pipeline.run_pretrain_nerf(cfg, args.out, args.threads, log)
    if args.command == "train-cues":
        return pipeline.run_train_cues(cfg, args.dataset, args.estimator, args.generator, args.out, log)
    if args.command == "eval":
        return pipeline.run_eval(cfg, args.estimator, args.generator, args.out, args.dataset)
    if args.command == "ablate":
        return pipeline.run_ablate(cfg, args.out, args.estimators, args.modes, args.encodings, args.seeds, args.threads, log)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_choices(args, parser)
    try:
        out = run(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"cuevis: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, FloatingPointError, OSError, NotImplementedError) as exc:
        print(f"cuevis {args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(out)}))
    return 0
