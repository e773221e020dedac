"""CASSI Tools - snapshot spectral imaging simulation, unfolded solvers and training."""

__version__ = "0.1.0"
