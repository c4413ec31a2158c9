"""Command-line interface: ``tephra-abc <command> [options]``.

Commands run one pipeline stage against a run directory (``--out``):

    generate   simulate the training set and its train/test split
    train      fit one distance (--technique, --quantile)
    evaluate   leave-one-out KL report for artifacts, or a full sweep
    observe    simulate a synthetic observation at observation.theta
    infer      APMC-ABC posterior for an observation and a distance artifact
    ppc        posterior predictive check from the last inference

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import TECHNIQUES, ConfigError, default_config, load_config
from .abc import SimulationFailed
from .io import ArtifactError
from .scheduler import BatchError, TeamUnavailable

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--teams", type=int, help="number of simulation teams")
    common.add_argument("--workers-per-team", type=int, help="processes per team")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tephra-abc", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate the training set")
    t = sub.add_parser("train", parents=[common], help="fit a distance")
    t.add_argument("--technique", choices=TECHNIQUES + ("oracle",))
    t.add_argument("--quantile", type=float)
    e = sub.add_parser("evaluate", parents=[common], help="KL report")
    e.add_argument("artifacts", nargs="*", help="distance artifacts; none runs the configured sweep")
    sub.add_parser("observe", parents=[common], help="simulate a synthetic observation")
    i = sub.add_parser("infer", parents=[common], help="run APMC-ABC")
    i.add_argument("--artifact", required=True)
    i.add_argument("--observation")
    c = sub.add_parser("ppc", parents=[common], help="posterior predictive check")
    c.add_argument("--observation")
    return p


def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    return cfg.with_overrides(
        **{
            "seed": args.seed,
            "parallel.teams": args.teams,
            "parallel.workers_per_team": args.workers_per_team,
        }
    )


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "train" and args.quantile is not None and not 0 < args.quantile < 1:
            raise ConfigError("--quantile must lie in (0, 1)")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "generate":
            res = pipeline.generate(cfg, args.out)
        elif args.command == "train":
            res = pipeline.train(cfg, args.out, args.technique, args.quantile)
        elif args.command == "evaluate":
            res = pipeline.evaluate(cfg, args.out, args.artifacts)
        elif args.command == "observe":
            res = pipeline.observe(cfg, args.out)
        elif args.command == "infer":
            res = pipeline.infer(cfg, args.out, args.artifact, args.observation)
        else:
            res = pipeline.ppc(cfg, args.out, args.observation)
    except (pipeline.StageError, ArtifactError, SimulationFailed, BatchError, TeamUnavailable, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for f in res.files:
        print(f)
    for key, value in res.info.items():
        print(f"{key}: {value}", file=sys.stderr)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
