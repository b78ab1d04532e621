#!/usr/bin/env python3
"""Temperatures versus cavity detuning, with instability flags.

Usage: python scripts/detuning_sweep.py [CONFIG] [--set KEY=VALUE ...] [--jobs N] [--out DIR]
Arguments are passed to ``levicav sweep-detuning``.
"""
import sys

from levicav.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep-detuning", *sys.argv[1:]]))
