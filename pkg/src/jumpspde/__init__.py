"""Lattice SPDEs driven by pure-jump martingale noise: noise sampling and
brackets, pathwise stochastic integrals, contraction power counting, heat
kernel decompositions and renormalization constants, and explicit solvers."""

__version__ = "0.1.0"
