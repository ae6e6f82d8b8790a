"""Command-line entry point: ``latentuad <subcommand> --config run.json [--seed N] [--fold K]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import _jit, config, pipeline
from .config import ConfigError
from .container import ContainerError
from .pipeline import METHODS, STAGES, StageError
from .volume import VolumeFormatError

log = logging.getLogger("latentuad")

PER_FOLD = {
    "sae-train": pipeline.sae_train,
    "features": pipeline.features,
    "fit-ocsvm": pipeline.fit_ocsvm_stage,
    "fit-mmst": pipeline.fit_mmst_stage,
    "threshold": pipeline.threshold,
    "aggregate": pipeline.aggregate,
    "evaluate": pipeline.evaluate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON pipeline configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--run-dir", metavar="DIR", help="use this run directory instead of the stamped one")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="latentuad", description="Unsupervised anomaly detection on multi-channel volumes.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic cohort to the data directory")
    p.add_argument("--out", metavar="DIR", help="output directory (default: paths.data_dir)")
    p.add_argument("--delta", type=float, help="anomaly contrast in texture-sigma units")

    sub.add_parser("folds", parents=[common], help="draw the stratified folds")
    for name in PER_FOLD:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--fold", type=int, required=True, metavar="K")
    p = sub.add_parser("score", parents=[common], help="anomaly maps for one method")
    p.add_argument("method", choices=METHODS)
    p.add_argument("--fold", type=int, required=True, metavar="K")

    p = sub.add_parser("run-all", parents=[common], help="every stage for every (or one) fold, then merge results")
    p.add_argument("--fold", type=int, metavar="K", help="run a single fold")
    p.add_argument("--stage", choices=("folds",) + STAGES, help="resume at this stage")
    return ap


def resolve_config(args) -> config.PipelineConfig:
    cfg = config.load(args.config) if args.config else config.PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _fail(stage, msg, path=None, code=2):
    print(json.dumps({"error": msg, "stage": stage, "file": path}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _jit.set_threads()
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        return _fail("config", str(e), args.config)
    except OSError as e:
        return _fail("config", e.strerror or str(e), args.config)
    print(json.dumps({"command": args.command, "seed": cfg.seed, "config": cfg.to_dict()}, sort_keys=True), file=sys.stderr)

    try:
        if args.command == "phantom-gen":
            subjects = pipeline.phantom_gen(cfg, args.out, args.delta)
            print(f"wrote {len(subjects)} subjects to {args.out or cfg.paths.data_dir}")
            return 0
        if args.command == "run-all":
            path, rows = pipeline.run_all(cfg, None if args.fold is None else [args.fold], args.stage, args.run_dir)
            print(path)
            return 0
        run = pipeline.Run(cfg, args.run_dir)
        if args.command == "folds":
            folds = pipeline.make_folds(run)
            print(os.path.join(run.dir, "folds.json"))
            return 0
        if args.command == "score":
            pipeline.score(run, args.fold, (args.method,))
        else:
            PER_FOLD[args.command](run, args.fold)
        print(run.fold_dir(args.fold))
        return 0
    except StageError as e:
        return _fail(e.stage, str(e), e.path)
    except (VolumeFormatError, ContainerError) as e:
        return _fail(args.command, str(e))
    except (ValueError, OSError) as e:
        return _fail(args.command, str(e), getattr(e, "filename", None))


if __name__ == "__main__":
    sys.exit(main())
