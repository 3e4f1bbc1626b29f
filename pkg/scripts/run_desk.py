#!/usr/bin/env python3
"""Run the desk pipeline for one config over several seeds and tabulate the results.

    python scripts/run_desk.py configs/linear_reach.cfg --seeds 0..4
    python scripts/run_desk.py configs/acceptance.cfg --seeds 0..1 --set env.name=damped_spring --skip sweep

Each seed gets its own victim under <output_dir>/seed<k>/. The table lists
the return ratio of every attack and the KL change of the SI runs.
"""

import argparse
import json
import sys
from pathlib import Path

from polsteal.cli import main as cli
from polsteal.cli import parse_seeds
from polsteal.config import load_config

ATTACKS = [
    ("si", ["attack"]),
    ("si_defense", ["attack", "--defense", "on"]),
    ("random1", ["attack", "--baseline", "random1"]),
    ("random10", ["attack", "--baseline", "random10"]),
    ("random100", ["attack", "--baseline", "random100"]),
    ("reffit", ["attack", "--baseline", "reffit"]),
]


def run(config, seeds, overrides, skip):
    extra = [a for o in overrides for a in ("--set", o)]
    root = load_config(config, overrides).output_path()
    steps = [["build-victim"]] + [argv for label, argv in ATTACKS if label not in skip]
    if "correlation" not in skip:
        steps.append(["analyze", "--experiment", "correlation"])
    if "sweep" not in skip:
        steps.append(["analyze", "--experiment", "sweep"])
    for argv in steps:
        code = cli([argv[0], str(config), *argv[1:], "--seeds", seeds, *extra])
        if code:
            sys.exit(code)
    return root


def table(root, seeds, skip):
    labels = [label for label, _ in ATTACKS if label not in skip]
    print("seed  " + "  ".join(f"{label:>10}" for label in labels) + "  si dKL%")
    for s in parse_seeds(seeds):
        cells, dkl = [], ""
        for label in labels:
            doc = json.loads((root / f"seed{s}/attack/{label}/report.json").read_text())
            cells.append(f"{doc['return_ratio']:10.3f}")
            if label == "si":
                dkl = f"{doc['delta_kl_percent']:+.1f}"
        print(f"{s:4d}  " + "  ".join(cells) + f"  {dkl}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", type=Path)
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--skip", action="append", default=[], help="attack label or analysis name to leave out")
    args = p.parse_args()
    table(run(args.config, args.seeds, args.set, set(args.skip)), args.seeds, set(args.skip))
