"""Bayesian characterization of qubit parameters.

Particle-based inference (SIR, tempered estimation) with pluggable
Markov kernels (Liu-West, random walk Metropolis, Hamiltonian Monte
Carlo and stochastic-gradient/subsampled variants, Gaussian rejection
filtering), adaptive experimental design heuristics, and a reproducible
experiment harness driven by simulated two-level systems.
"""

from ._backend import BACKEND_NAME
from . import design, ensemble, harness, kernels, models, smc, subsampling

__all__ = [
    "BACKEND_NAME",
    "design",
    "ensemble",
    "harness",
    "kernels",
    "models",
    "smc",
    "subsampling",
]

__version__ = "0.1.0"
