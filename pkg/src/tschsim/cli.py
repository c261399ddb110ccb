"""Command-line front end.

    tschsim list
    tschsim run <experiment|scenario-file> [--seed N] [--out DIR]
                [--override section.key=value]...

Exit codes: 0 all checks passed, 1 an experiment's built-in checks failed,
2 the scenario or arguments could not be parsed.
"""

from __future__ import annotations

import argparse
import sys

from .harness import EXPERIMENTS, run_experiment
from .scenario import ScenarioError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tschsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a named experiment or a scenario file")
    run_p.add_argument("target", help="experiment name or path to a scenario file")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a scenario value (repeatable)",
    )

    sub.add_parser("list", help="list the registered experiments")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "list":
        for name in EXPERIMENTS:
            print(name)
        return 0

    overrides = {}
    for item in args.override:
        if "=" not in item:
            print(f"bad --override {item!r}: expected SECTION.KEY=VALUE", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()

    try:
        code, paths, failures = run_experiment(
            args.target, seed=args.seed, out_dir=args.out, overrides=overrides
        )
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    for label, path in paths.items():
        print(f"{label}: {path}")
    for failure in failures:
        print(f"FAIL: {failure}")
    if not failures and args.target in EXPERIMENTS:
        print("all checks passed")
    return code


if __name__ == "__main__":
    sys.exit(main())
