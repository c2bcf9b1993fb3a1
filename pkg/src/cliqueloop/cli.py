"""Command-line entry point: one subcommand per pipeline stage.

Every command takes ``--config``, ``--seed``, ``--workers`` and ``--out``
(the work directory). Failures exit non-zero and print a JSON object with
``error``, ``message`` and ``command`` keys on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import pipeline
from .config import load_config, tomllib
from .exceptions import CliqueLoopError, ConfigError, MissingArtifactError
from .plotting import plot_pr_curves, plot_sweep

log = logging.getLogger("cliqueloop")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4

def _common(p):
    p.add_argument("--config", type=Path, default=None, help="TOML config file (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override every seeded config section")
    p.add_argument("--workers", type=int, default=1, help="worker processes for infer/verify")
    p.add_argument("--out", type=Path, default=Path("work"), help="work directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="cliqueloop", description="Graph-consensus loop-closure detection")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write synthetic keyframe bundles",
        "fit-vocab": "cluster training descriptors into a vocabulary",
        "extract-vlad": "encode every keyframe as a VLAD vector",
        "index": "build per-sequence search indices",
        "retrieve": "retrieve top-k neighbours for every keyframe",
        "train": "train the clique edge scorer",
        "infer": "score query edges of the test cliques",
        "verify": "geometrically verify candidate pairs",
        "eval": "compute AP/MR/RPE/ATE and the efficiency sweep",
        "run": "run every stage in order",
    }
    for name, h in helps.items():
        _common(sub.add_parser(name, help=h))
    p = sub.add_parser("plot", help="SVG plots of PR curves and the efficiency sweep")
    _common(p)
    p.add_argument("--pr", type=Path, nargs="*", default=None, help="PR-curve CSV files")
    p.add_argument("--sweep", type=Path, default=None, help="sweep CSV file")
    p = sub.add_parser("sweep", help="rerun the pipeline over values of one config key")
    _common(p)
    p.add_argument("--param", required=True, help="dotted config key, e.g. retrieval.k_pct")
    p.add_argument("--values", required=True, nargs="+", help="values as TOML literals")
    p.add_argument("--stages", nargs="+", default=None, help="subset of stages (default: all)")
    p = sub.add_parser("config", help="print the effective config as TOML")
    _common(p)
    return parser


def _literal(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def cmd_sweep(args, cfg, work):
    unknown = set(args.stages or []) - set(pipeline.STAGE_ORDER)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    variants = {f"{args.param}={v}": {args.param: _literal(v)} for v in args.values}
    rows = pipeline.run_sweep(cfg, variants, work, args.stages, args.workers, work.p("sweep_report.json"))
    for r in rows:
        log.info("%s: AP %.4f MR %.4f (%.1f s)", r.variant, r.ap, r.mr, r.seconds)
    return work.p("sweep_report.json")


def cmd_plot(args, cfg, work):
    pr = args.pr if args.pr is not None else sorted(work.root.glob("prcurve_*.csv"))
    sweep = args.sweep if args.sweep is not None else work.p("sweep.csv")
    if not pr and not Path(sweep).is_file():
        raise MissingArtifactError("no PR-curve or sweep files to plot (run eval)")
    plot_dir = work.ensure("plots")
    # render everything first so a bad input leaves no partial output behind
    staged = []
    tmp = plot_dir / ".pending"
    tmp.mkdir(exist_ok=True)
    try:
        if pr:
            plot_pr_curves(pr, tmp / "pr_curve.svg")
            staged.append("pr_curve.svg")
            for p in pr:
                shutil.copyfile(p, tmp / Path(p).name)
                staged.append(Path(p).name)
        if Path(sweep).is_file():
            plot_sweep(sweep, tmp / "sweep.svg")
            shutil.copyfile(sweep, tmp / "sweep.csv")
            staged += ["sweep.svg", "sweep.csv"]
        for name in staged:
            (tmp / name).replace(plot_dir / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return [plot_dir / n for n in staged]


def _error(command, exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        work = pipeline.Workdir(args.out)
        if args.command == "config":
            sys.stdout.write(cfg.to_toml())
            return EXIT_OK
        work.ensure()
        if args.command == "plot":
            outs = cmd_plot(args, cfg, work)
            log.info("wrote %s", ", ".join(map(str, outs)))
            return EXIT_OK
        if args.command == "sweep":
            sys.stdout.write(cmd_sweep(args, cfg, work).read_text())
            return EXIT_OK
        pipeline.run_stages(cfg, work, None if args.command == "run" else [args.command], args.workers)
        if args.command in ("eval", "run"):
            sys.stdout.write(work.p("report.json").read_text())
        return EXIT_OK
    except ConfigError as exc:
        return _error(args.command, exc, EXIT_CONFIG)
    except (MissingArtifactError, FileNotFoundError) as exc:
        return _error(args.command, exc, EXIT_MISSING)
    except (CliqueLoopError, ValueError, KeyError) as exc:
        return _error(args.command, exc, EXIT_DATA)
    except Exception as exc:  # noqa: BLE001  last-resort machine-readable report
        return _error(args.command, exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
