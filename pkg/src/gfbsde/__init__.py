"""Numerical toolkit for coupled forward-backward SDEs driven by a G-Brownian motion."""

__version__ = "0.1.0"
