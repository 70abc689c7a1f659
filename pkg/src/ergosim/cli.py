"""Command-line entry points for the scenario harness.

Exit codes: 0 success, 1 run error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_and_resolve
from .harness import (
    run_coverage,
    run_localization,
    run_monte_carlo,
    run_search_and_localize,
    write_run_report,
)

_RUNNERS = {
    "coverage": run_coverage,
    "localize": run_localization,
    "search": run_search_and_localize,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ergosim",
        description="Ergodic coverage and bearing-only target localization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to a scenario config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out-dir", default=None, help="directory for traces and the summary")
        p.add_argument("--quiet", action="store_true", help="suppress the summary printout")

    for name, help_text in [
        ("coverage", "static-distribution ergodic exploration"),
        ("localize", "EID-driven localization of configured targets"),
        ("search", "simultaneous exploration and localization"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_common(p)

    mc = sub.add_parser("montecarlo", help="batch of independently seeded trials")
    add_common(mc)
    mc.add_argument("--trials", type=int, default=20)
    mc.add_argument("--workers", type=int, default=1)

    val = sub.add_parser("validate-config", help="check a config and exit")
    val.add_argument("--config", required=True)
    return parser


def cli_main(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0

    try:
        resolved = load_and_resolve(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.command == "validate-config":
        print(f"{args.config}: ok")
        return 0

    if getattr(args, "seed", None) is not None:
        resolved["run"]["seed"] = args.seed

    try:
        if args.command == "montecarlo":
            aggregate = run_monte_carlo(
                resolved, trials=args.trials, seed_base=resolved["run"]["seed"],
                workers=args.workers,
            )
            if args.out_dir:
                out = Path(args.out_dir)
                out.mkdir(parents=True, exist_ok=True)
                with open(out / "aggregate.json", "w") as fh:
                    json.dump(aggregate, fh, indent=2, sort_keys=True, default=str)
            if not args.quiet:
                brief = {k: v for k, v in aggregate.items() if k != "per_trial"}
                print(json.dumps(brief, indent=2, default=str))
            return 0

        expected = args.command
        if resolved["scenario"] != expected:
            print(
                f"config error: scenario is '{resolved['scenario']}', "
                f"but the '{expected}' command was invoked",
                file=sys.stderr,
            )
            return 2
        report = _RUNNERS[expected](resolved)
        if args.out_dir:
            write_run_report(report, args.out_dir)
        if not args.quiet:
            print(json.dumps(report.summary, indent=2, default=str))
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001  (CLI boundary: report and fail)
        print(f"run error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
