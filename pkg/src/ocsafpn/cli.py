"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 invalid config or data,
3 numeric failure (non-finite loss, gradient check fail).

Thread pinning must happen before the numeric stack loads, so this module
defers every heavy import until after --threads is applied.  The pin works
for fresh processes; it cannot retroactively shrink pools in a process that
already imported the BLAS runtime.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> _Parser:
    p = _Parser(prog="ocsafpn", description=__doc__.split("\n")[0])
    p.add_argument("--config", metavar="FILE",
                   help="JSON file of ExperimentConfig fields")
    p.add_argument("--seed", type=int,
                   help="override both model_seed and data_seed")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread cap (default 1, for determinism)")
    p.add_argument("--out", default="runs", metavar="DIR",
                   help="base output directory (default runs)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND",
                         parser_class=_Parser)

    b = sub.add_parser("build-data",
                       help="synthesize the clean + degraded image corpus")
    b.add_argument("--data", metavar="DIR", help="dataset directory "
                   "(default <out>/data)")
    b.add_argument("--overwrite", action="store_true",
                   help="rebuild over a non-empty directory")

    t = sub.add_parser("train",
                       help="train a detector; writes checkpoint + loss log")
    t.add_argument("--data", metavar="DIR")
    t.add_argument("--run", metavar="DIR", help="run directory (default <out>/run)")

    e = sub.add_parser("eval",
                       help="score a checkpoint (or the oracle) on a test split")
    e.add_argument("--data", metavar="DIR")
    e.add_argument("--run", metavar="DIR")
    e.add_argument("--checkpoint", metavar="DIR",
                   help="default <run>/checkpoint")
    e.add_argument("--split", help="clean or a preset name (default from config)")
    e.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (sanity ceiling)")

    a = sub.add_parser("ablate",
                       help="train + eval a toggle grid, write report tables")
    a.add_argument("--data", metavar="DIR")
    a.add_argument("--axis", default="all",
                   choices=["connections", "fusion", "backbone", "all"])
    a.add_argument("--seeds", type=int, default=1, metavar="N",
                   help="model seeds per grid row (default 1)")

    g = sub.add_parser("gradcheck",
                       help="finite-difference audit of every block's backward")
    g.add_argument("--blocks", metavar="A,B,...",
                   help="comma list (default: all registered blocks)")
    g.add_argument("--json", metavar="FILE", help="also write the report as JSON")

    f = sub.add_parser("freq-diag",
                       help="band-split panels + energy report for one scene")
    f.add_argument("--preset", default="n0.2_v1")
    f.add_argument("--sigma", type=float, default=2.0)
    f.add_argument("--image-id", type=int, default=0)
    return p


def _load_config(args):
    from .experiment import ExperimentConfig
    overrides = {}
    if args.seed is not None:
        overrides["model_seed"] = args.seed
        overrides["data_seed"] = args.seed
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _log(msg: str) -> None:
    print(msg, flush=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("ocsafpn: a command is required (see --help)")
        _pin_threads(args.threads)
        from .experiment import NumericFailure
        try:
            return _dispatch(args)
        except NumericFailure as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return 3
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    from . import experiment as E
    out = Path(args.out)
    cfg = _load_config(args)

    if args.command == "build-data":
        data = Path(args.data) if args.data else out / "data"
        E.build_dataset(cfg, data, overwrite=args.overwrite, log=_log)
        _log(f"dataset ready at {data}")
        return 0

    if args.command == "train":
        data = Path(args.data) if args.data else out / "data"
        run = Path(args.run) if args.run else out / "run"
        summary = E.train(cfg, data, run, log=_log)
        _log(f"trained {summary['steps']} steps, final loss "
             f"{summary['final_loss']:.4f}, checkpoint at {run / 'checkpoint'}")
        return 0

    if args.command == "eval":
        data = Path(args.data) if args.data else out / "data"
        run = Path(args.run) if args.run else out / "run"
        ckpt = None
        if not args.oracle:
            ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoint"
        row = E.evaluate(cfg, data, run, checkpoint=ckpt, split=args.split,
                         oracle=args.oracle, log=_log)
        _log(f"split {row['split']}: mAP {row['map']:.4f}")
        return 0

    if args.command == "ablate":
        data = Path(args.data) if args.data else out / "data"
        rows = E.ablate(cfg, data, out, axis=args.axis, n_seeds=args.seeds,
                        log=_log)
        _log(f"wrote {len(rows)} report rows under {out}")
        return 0

    if args.command == "gradcheck":
        blocks = args.blocks.split(",") if args.blocks else None
        report, ok = E.run_gradcheck(blocks, log=_log)
        if args.json:
            with open(args.json, "w") as f:
                json.dump(report, f, indent=2, sort_keys=True)
                f.write("\n")
        return 0 if ok else 3

    if args.command == "freq-diag":
        rep = E.freq_diag(cfg, out / "freq", preset=args.preset,
                          sigma=args.sigma, image_id=args.image_id, log=_log)
        _log(f"panels and energies under {out / 'freq'}")
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def entry() -> None:
    sys.exit(main())
