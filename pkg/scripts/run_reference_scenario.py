#!/usr/bin/env python3
"""Run the bundled three-unicycle scenario and write its artifacts.

Equivalent to `dnmpc run` on the packaged scenario file, with a convenience
flag for the long convergence run. Artifacts: trajectory.csv and report.txt
in the output directory.
"""

import argparse
import sys
from pathlib import Path

from dnmpc import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--extended", action="store_true",
                        help="run 100 s instead of the default 10 s "
                             "(long enough to observe terminal trapping)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario weight seed")
    args = parser.parse_args()

    scenario = Path(cli.__file__).parent / "scenarios" / "three_unicycles.yaml"
    argv = ["run", str(scenario), "--out", args.out]
    if args.extended:
        argv += ["--total-time", "100.0"]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
