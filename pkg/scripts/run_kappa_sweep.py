#!/usr/bin/env python3
"""Sweep the inner condition number with the warm-started solver.

Each grid point gets its own subdirectory; summary.csv collects
axis_value, complexity_to_eps, final_gap and sweep_meta.json carries the
fitted log-log slope (theory predicts 0.5).
"""

import argparse
import sys
from pathlib import Path

from bilevel_lab.cli import main as cli_main

CONFIG = Path(__file__).parent / "configs" / "kappa_sweep.json"


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    argv = ["sweep", str(CONFIG), "--jobs", str(args.jobs)]
    if args.out:
        argv += ["--out", args.out]
    sys.exit(cli_main(argv))
