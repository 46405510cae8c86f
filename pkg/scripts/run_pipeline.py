"""Run generate-data, train, train-policy and evaluate for one config.

    python3 scripts/run_pipeline.py configs/univariate.json --seed 1 --output runs/uni-s1
"""

import argparse
import sys

from hecad.cli import main

STEPS = ("generate-data", "train", "train-policy", "evaluate")


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.add_argument("--force", action="store_true", help="rebuild artifacts that already exist")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    common = ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if args.output:
        common += ["--output", args.output]
    for step in STEPS:
        argv = (["-v"] if args.verbose else []) + [step] + common
        if args.force and step != "evaluate":
            argv.append("--force")
        code = main(argv)
        if code:
            print(f"{step} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
