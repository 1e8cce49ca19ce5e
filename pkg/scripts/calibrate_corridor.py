#!/usr/bin/env python3
"""Baseline sweep used to pick corridor lengths for the learning checks.

For each length, reports the bonus-free UCT mean return at the base budget
and with doubled depth, so you can see where the exit falls out of reach.
"""

import argparse
import dataclasses

from pgrd_uct import harness


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", type=int, nargs="+", default=[4, 5, 6, 7, 8, 12, 20])
    p.add_argument("--games", type=int, default=20)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--trajectories", type=int, default=16)
    p.add_argument("--max-steps", type=int, default=None, help="defaults to twice the length")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print("length,base_mean,base_stderr,deeper_mean,deeper_stderr")
    for length in args.lengths:
        cfg = harness.config_from_dict({
            "env": {"family": "DelayedCorridor", "params": {"length": length}, "num_actions": 2},
            "planner": {"n_trajectories": args.trajectories, "max_depth": args.depth},
            "preprocess": {"frame_stack": 1, "mean_games": 1},
        })
        setup = harness.build(cfg)
        steps = args.max_steps or 2 * length
        base = harness.evaluate(setup.env, setup.pre, setup.spec, None, cfg.planner, args.games, args.seed, steps)
        deep = dataclasses.replace(cfg.planner, max_depth=2 * args.depth)
        deeper = harness.evaluate(setup.env, setup.pre, setup.spec, None, deep, args.games, args.seed, steps)
        print(f"{length},{base.mean:.3f},{base.stderr:.3f},{deeper.mean:.3f},{deeper.stderr:.3f}")


if __name__ == "__main__":
    main()
