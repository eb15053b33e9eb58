"""Command-line entry point: ``rgenima <subcommand> --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 ok, 2 unparsable input, 3 bad configuration, 4 empty result,
5 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .attribution import EmptyTrace, MissingSpan
from .config import ConfigError, RunConfig, load_config
from .genome.prompt import GenomeParseError
from .genome.types import GenotypeParseError
from .model.checkpoint import CheckpointError
from .model.vocab import UnknownToken
from .stats.bootstrap import EmptySample, TopKExceedsFeatures
from .volume_io import VolumeFormatError

log = logging.getLogger("rgenima")

EXIT_OK, EXIT_PARSE, EXIT_CONFIG, EXIT_EMPTY, EXIT_MISSING = 0, 2, 3, 4, 5

PARSE_ERRORS = (GenotypeParseError, GenomeParseError, VolumeFormatError, CheckpointError, UnknownToken,
                json.JSONDecodeError, UnicodeDecodeError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgenima", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*pipeline.PIPELINE, "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run every stage in order")
        p.add_argument("--config", required=True, help="sectioned key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out (run directory)")
        p.add_argument("--threads", type=int, default=None, help="override [run] threads")
    return ap


def resolve(args) -> RunConfig:
    if not Path(args.config).is_file():
        raise ConfigError(f"config file {args.config} not found")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("run", "seed", str(args.seed))
    if args.out is not None:
        cfg.set("run", "out", args.out)
    if args.threads is not None:
        cfg.set("run", "threads", str(args.threads))
    if cfg["run"]["seed"] < 0 or cfg["run"]["threads"] < 1:
        raise ConfigError("seed must be non-negative and threads at least 1")
    return cfg


def _log_config(cfg: RunConfig, command: str) -> None:
    text = cfg.dump()
    log.info("resolved config for %s:\n%s", command, text)
    d = Path(cfg["run"]["out"]) / "logs"
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{command}.config.ini").write_text(text, encoding="utf-8")


def run(command: str, cfg: RunConfig) -> None:
    stages = pipeline.PIPELINE if command == "pipeline" else (command,)
    # BLAS stays single-threaded so every matrix product sums in one fixed order;
    # [run] threads sets the worker count of the per-subject stages instead.
    with threadpool_limits(limits=1):
        for stage in stages:
            written = pipeline.STAGE_FUNCS[stage](cfg)
            for label, path in written.items():
                print(f"{stage}\t{label}\t{path}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        _log_config(cfg, args.command)
        run(args.command, cfg)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (pipeline.EmptyResult, EmptySample) as exc:
        log.error("empty result: %s", exc)
        return EXIT_EMPTY
    except TopKExceedsFeatures as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except PARSE_ERRORS as exc:
        log.error("parse: %s", exc)
        return EXIT_PARSE
    except (EmptyTrace, MissingSpan) as exc:
        log.error("attribution: %s", exc)
        return EXIT_EMPTY
    except ValueError as exc:
        log.error("parse: %s", exc)
        return EXIT_PARSE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
