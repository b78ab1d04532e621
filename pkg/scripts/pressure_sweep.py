#!/usr/bin/env python3
"""Temperatures and linewidths versus gas pressure at three trap positions.

Usage: python scripts/pressure_sweep.py [CONFIG] [--set KEY=VALUE ...] [--jobs N] [--out DIR]
Arguments are passed to ``levicav sweep-pressure``.
"""
import sys

from levicav.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep-pressure", *sys.argv[1:]]))
