#!/usr/bin/env python3
"""Train a reward bonus on the delayed corridor, then print the four-arm table.

    python scripts/run_corridor_experiment.py --out runs/corridor --seed 0
"""

import argparse
import sys
from pathlib import Path

from pgrd_uct import harness

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "corridor.yaml"))
    p.add_argument("--out", default="runs/corridor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    common = ["--config", args.config, "--out", args.out, "--seed", str(args.seed)]
    for kv in args.set:
        common += ["--set", kv]
    code = harness.run(["train", *common])
    if code:
        return code
    return harness.run(["compare", *common, "--checkpoint", str(Path(args.out) / "final.npz")])


if __name__ == "__main__":
    sys.exit(main())
