#!/usr/bin/env python3
"""Temperatures versus tweezer power at each axis' best-cooling position.

Usage: python scripts/power_sweep.py [CONFIG] [--set KEY=VALUE ...] [--jobs N] [--out DIR]
Arguments are passed to ``levicav sweep-power``.
"""
import sys

from levicav.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep-power", *sys.argv[1:]]))
