#!/usr/bin/env python3
"""Run the full lower-bound verification campaign at the mild preset.

Checks support caps, the suboptimality floor, the gradient-norm floor, the
quartic/budget-root residuals, and the geometric-minimizer certificate; emits
a single pass/fail JSON report.  Exit code 3 means at least one item failed.
"""

import argparse
import sys
from pathlib import Path

from bilevel_lab.cli import main as cli_main

CONFIG = Path(__file__).parent / "configs" / "lower_bound_battery.json"


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    argv = ["verify-lb", str(CONFIG)]
    if args.out:
        argv += ["--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    sys.exit(cli_main(argv))
