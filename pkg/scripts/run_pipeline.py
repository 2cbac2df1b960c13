#!/usr/bin/env python3
"""Run the full default pipeline end to end and print the metrics report.

Equivalent to the six subcommands in order:

    distill-story --out OUT gen-data
    distill-story --out OUT train-teachers
    distill-story --out OUT distill
    distill-story --out OUT explain
    distill-story --out OUT story
    distill-story --out OUT evaluate

Usage: python scripts/run_pipeline.py [--out DIR] [--config PATH] [--seed N]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from distill_story.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="out", help="output root (default: out)")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="training/explanation seed")
    args = parser.parse_args()

    base = ["--out", args.out]
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]

    start = time.time()
    for command in ("gen-data", "train-teachers", "distill", "explain", "story", "evaluate"):
        print(f"== {command} ==", flush=True)
        code = cli_main(base + [command])
        if code != 0:
            return code
    print(f"\npipeline finished in {time.time() - start:.0f}s")
    report = json.loads((Path(args.out) / "metrics.json").read_text())
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
