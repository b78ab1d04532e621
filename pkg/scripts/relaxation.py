#!/usr/bin/env python3
"""Ensemble temperature relaxation after switching cavity cooling on and off.

Usage: python scripts/relaxation.py [CONFIG] [--set KEY=VALUE ...] [--jobs N] [--out DIR]
Arguments are passed to ``levicav relaxation``.
"""
import sys

from levicav.cli import main

if __name__ == "__main__":
    sys.exit(main(["relaxation", *sys.argv[1:]]))
