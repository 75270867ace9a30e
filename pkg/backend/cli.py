"""
Command line entry point
sim / overlay / match / report verbs over the archersim modules
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, NoReturn, Optional

import uvicorn

from errors import ArcherError, ConfigError, InvalidConfigError
from harness import (
    emit_report,
    load_config,
    load_summary,
    overlay_demo,
    parse_sweep,
    resolve_config_path,
    resolve_seed,
    run_experiment,
    run_sweep,
    summary_table,
)
from matchmaker import AdKind, check_match, load_ad
from settings import log_level

logger = logging.getLogger(__name__)

USAGE_CATEGORIES = {"usage", ConfigError.category, InvalidConfigError.category}


class UsageError(ArcherError):
    category = "usage"


class ArgumentParser(argparse.ArgumentParser):
    """Argument errors become one machine-parsable line instead of usage text"""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="archersim", description="Community grid middleware simulator")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=ArgumentParser)

    sim = verbs.add_parser("sim", help="run experiments")
    sim_verbs = sim.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    run = sim_verbs.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True)
    run.add_argument("--sweep", help="seeds=a..b runs one experiment per seed in parallel")
    run.add_argument("--transport", choices=["memory", "loopback"])
    for name in ("fig2", "scenario1"):
        builtin = sim_verbs.add_parser(name, help=f"run the built-in {name} profile")
        builtin.add_argument("--seed", type=int)
        builtin.add_argument("--out")
        builtin.add_argument("--sweep")

    overlay = verbs.add_parser("overlay", help="overlay tools")
    overlay_verbs = overlay.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    demo = overlay_verbs.add_parser("demo", help="build an overlay and tunnel between random pairs")
    demo.add_argument("--nodes", type=int, default=64)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--pairs", type=int, default=100)
    demo.add_argument("--bits", type=int, default=160)
    demo.add_argument("--transport", choices=["memory", "loopback"], default="memory")
    demo.add_argument("--dump", help="write the topology as JSON lines")

    match = verbs.add_parser("match", help="matchmaking tools")
    match_verbs = match.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    check = match_verbs.add_parser("check", help="match one job ad against one resource ad")
    check.add_argument("--job", required=True)
    check.add_argument("--resource", required=True)

    report = verbs.add_parser("report", help="report tools")
    report_verbs = report.add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    show = report_verbs.add_parser("show", help="print a report summary table")
    show.add_argument("directory")

    serve = verbs.add_parser("serve", help="start the report service")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    return parser


def _print_json(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_sim(args) -> int:
    ref = args.config if args.action == "run" else args.action
    config = load_config(ref)
    seed = resolve_seed(args.seed, config)
    out = Path(args.out) if args.out else Path(config.output.directory or f"reports/{config.experiment.name}")
    if args.sweep:
        rows = run_sweep(resolve_config_path(ref), parse_sweep(args.sweep), out)
        _print_json({"out": str(out), "seeds": [r["seed"] for r in rows]})
        return 0
    report = run_experiment(config, seed, transport=getattr(args, "transport", None))
    emit_report(report, out)
    m = report.metrics
    _print_json({
        "out": str(out),
        "seed": seed,
        "makespan": round(m.makespan, 3),
        "median_runtime": round(m.median_runtime, 3),
        "mean_runtime": round(m.mean_runtime, 3),
        "steady_state_intercompletion": round(m.steady_state_intercompletion, 3),
        "serial_baseline": round(report.baseline.serial_makespan, 3),
    })
    return 0


def cmd_overlay(args) -> int:
    _print_json(overlay_demo(args.nodes, args.seed, args.pairs, args.bits, args.transport, args.dump))
    return 0


def cmd_match(args) -> int:
    job = load_ad(args.job, AdKind.JOB)
    resource = load_ad(args.resource, AdKind.RESOURCE)
    _print_json(check_match(job, resource))
    return 0


def cmd_report(args) -> int:
    print(summary_table(load_summary(args.directory)).to_string())
    return 0


def cmd_serve(args) -> int:
    uvicorn.run(
        "main:app",
        host=args.host or os.getenv("HOST", "0.0.0.0"),
        port=args.port or int(os.getenv("PORT", "8000")),
        log_level=log_level("INFO").lower(),
    )
    return 0


COMMANDS = {"sim": cmd_sim, "overlay": cmd_overlay, "match": cmd_match, "report": cmd_report, "serve": cmd_serve}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=log_level("WARNING"), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.verb](args)
    except ArcherError as e:
        print(f"ERROR:{e.category}: {e}".replace("\n", " "), file=sys.stderr)
        return 2 if e.category in USAGE_CATEGORIES else 1
    except OSError as e:
        print(f"ERROR:io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
