"""Command-line interface.

One subcommand per pipeline stage plus ``run`` (the whole pipeline),
``ncc`` (counterfactual fidelity scoring alone), and ``report``.
Exit codes: 0 success, 2 configuration error, 10+i failure in stage i.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("CFXQ_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfquant",
                                     description="counterfactual volume synthesis and "
                                                 "quantitative ROI interpretation")
    sub = parser.add_subparsers(dest="command", required=True)
    from .pipeline import STAGES

    def add_common(p):
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--scenario", default=None,
                       choices=["cn-mci", "mci-ad", "cn-ad", "cn-mci-ad"])
        p.add_argument("--force", action="store_true", help="ignore completion stamps")

    for stage in STAGES:
        add_common(sub.add_parser(stage, help=f"run the {stage} stage"))
    add_common(sub.add_parser("run", help="run the full pipeline"))
    add_common(sub.add_parser("ncc", help="score counterfactual maps against planted maps"))
    report = sub.add_parser("report", help="aggregate artifacts into report/")
    report.add_argument("--out", required=True)
    report.add_argument("--config", default=None)
    report.add_argument("--set", dest="overrides", action="append", default=[])
    return parser


def _load_cfg(args):
    from .config import load_config
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "scenario", None) is not None:
        overrides.append(f"scenario={args.scenario}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    from .config import RunConfig
    from .errors import CfquantError, ConfigError
    from . import pipeline

    try:
        cfg = _load_cfg(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    ctx = pipeline.PipelineContext(cfg, args.out)
    try:
        if args.command == "run":
            pipeline.run_pipeline(cfg, args.out, force=args.force)
        elif args.command == "report":
            pipeline.emit_report(ctx)
        elif args.command == "ncc":
            ctx.require("gen-cf")
            from . import fileio, metrics
            entries, rows = pipeline._ncc_entries(ctx)
            out = ctx.dir("eval")
            fileio.write_csv(out / "ncc.csv",
                             ["subject_id", "source_label", "target_label", "ncc"], rows)
            direction = metrics.ncc_directional(entries)
            fileio.write_csv(out / "ncc_summary.csv", ["group", "mean", "std", "n"],
                             [[g, repr(v[0]), repr(v[1]), v[2]] for g, v in direction.items()])
        else:
            ctx.root.mkdir(parents=True, exist_ok=True)
            (ctx.root / "config.resolved").write_text(ctx.cfg_text)
            pipeline.run_stage(ctx, args.command, force=args.force)
    except pipeline.StageError as exc:
        print(exc, file=sys.stderr)
        return 10 + exc.index
    except CfquantError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        if args.command in pipeline.STAGES:
            return 10 + pipeline.STAGES.index(args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
