"""Generalist flow-matching diffusion transformer on a verifiable shapes world."""

from unidiff._runtime import configure_threads, NumericalError

configure_threads()

__version__ = "0.1.0"

__all__ = ["NumericalError", "configure_threads", "__version__"]
