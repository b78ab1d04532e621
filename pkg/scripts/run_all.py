#!/usr/bin/env python3
"""Run every experiment with the bundled configuration.

Usage: python scripts/run_all.py [--out DIR] [--mode oracle|trajectory|nonlinear] [--jobs N]

Oracle mode finishes in seconds. Relaxation always simulates trajectories
(150 members per phase and direction) and takes a few minutes.
"""
import argparse
import sys

from levicav.cli import main

SUBCOMMANDS = ("steady-state", "sweep-pressure", "sweep-detuning", "sweep-power", "relaxation")


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--mode", default="oracle", choices=("oracle", "trajectory", "nonlinear"))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--skip-relaxation", action="store_true")
    args = ap.parse_args(argv)
    for sub in SUBCOMMANDS:
        if sub == "relaxation" and args.skip_relaxation:
            continue
        print(f"== {sub}", flush=True)
        code = main([sub, "--set", f"mode={args.mode}", "--jobs", str(args.jobs),
                     "--out", args.out])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
