"""Generative heat-sink fin design: guided diffusion, surrogates, and a CMA-ES baseline."""

__version__ = "0.1.0"
