"""``aoept`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, override, parse_config
from .errors import AoeptError

COMMANDS = ("gen-data", "pretrain", "build-collections", "train", "train-baseline", "eval", "nm2i",
            "scaling-sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoept", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
        if name in ("gen-data", "scaling-sweep"):
            p.add_argument("--config", type=Path, help="INI config file (defaults when omitted)")
            p.add_argument("--seed", type=int, help="override data, backbone and prompt seeds")
            p.add_argument("--method", choices=("attention", "mlp", "init"), help="MCP construction method")
            p.add_argument("--eta", type=float, help="missing rate in percent (train and test)")
            p.add_argument("--kind", help="missing kind: a modality name, both, or double")
        if name == "train":
            p.add_argument("--variant", choices=("aoept", "no_inst"), default="aoept")
        if name == "train-baseline":
            p.add_argument("--variant", choices=("baseline", "frozen"), default="baseline",
                           help="random-prompt baseline or the head-only lower bound")
        if name in ("eval", "nm2i"):
            p.add_argument("--variant", action="append", help="restrict to these variants (repeatable)")
    return parser


def _config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    eta = args.eta
    return override(cfg, method=args.method, kind=args.kind, eta_train=eta, eta_test=eta)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    log = logging.getLogger("aoept")
    out = args.out
    cmd = args.command
    if cmd == "gen-data":
        run_dir = pipeline.gen_data(_config(args), out)
        log.info("wrote data, tables and config to %s", run_dir.root)
    elif cmd == "pretrain":
        bb = pipeline.pretrain(out)
        log.info("backbone trained (train accuracy %.4f), checksum %s", bb.pretrain_accuracy, bb.saved_checksum)
    elif cmd == "build-collections":
        refined = pipeline.build_collections_stage(out)
        sizes = {m: [len(r) for r in layers] for m, layers in refined.items()}
        log.info("prototype counts per layer: %s", sizes)
    elif cmd in ("train", "train-baseline"):
        res = pipeline.train_stage(out, args.variant)
        best = res.history[res.best_epoch - 1]
        log.info("%s: best epoch %d, val accuracy %.4f, %d trainable parameters", args.variant,
                 res.best_epoch, best["val_acc"], res.model.num_trainable())
    elif cmd == "eval":
        for v, rep in pipeline.eval_stage(out, args.variant).items():
            log.info("%s: accuracy %.4f (range %.4f-%.4f), macro-F1 %.4f", v, rep.accuracy,
                     *rep.accuracy_range, rep.macro_f1)
    elif cmd == "nm2i":
        for v, rep in pipeline.nm2i_stage(out, args.variant).items():
            log.info("%s: mean NM2I %.4f", v, rep["mean"])
    elif cmd == "scaling-sweep":
        rows = pipeline.scaling_sweep(_config(args), out)
        log.info(json.dumps(pipeline.summarize_sweep(rows), indent=2))
    elif cmd == "report":
        print(pipeline.report(out))
    return 0


def main(argv=None) -> int:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS threads stay at the library default
        threadpool_limits = None
    try:
        cap = pipeline.thread_cap()
        if threadpool_limits is not None:
            with threadpool_limits(limits=cap):
                return run(argv)
        return run(argv)
    except AoeptError as exc:
        print(f"aoept: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
