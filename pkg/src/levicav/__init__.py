"""Simulation and analysis toolkit for cavity cooling of a levitated nanoparticle
by coherent scattering, in three dimensions."""

__version__ = "0.1.0"

from .params import (AXES, ANTINODE, NODE, SLOPE, InstabilityError, ParameterError,  # noqa: F401
                     SystemParams, paper_defaults)
