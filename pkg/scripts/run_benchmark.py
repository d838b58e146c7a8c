#!/usr/bin/env python3
"""Run the accelerated solver on the strongly-convex benchmark instance.

Writes trace.csv / instance.json / resolved_config.json / summary.csv under
--out (default results/benchmark_run).
"""

import argparse
import sys
from pathlib import Path

from bilevel_lab.cli import main as cli_main

CONFIG = Path(__file__).parent / "configs" / "benchmark_run.json"


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    argv = ["run", str(CONFIG)]
    if args.out:
        argv += ["--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(cli_main(argv))
