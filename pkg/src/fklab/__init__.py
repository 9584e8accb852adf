"""Numerical laboratory for Feynman-Kac perturbations of symmetric Markov
processes: path simulation, perturbation functionals, spectral functions,
Kato-class tests, kernel estimation, and heat-kernel envelope fits."""

__version__ = "0.1.0"

from . import envelopes, errors, feynman_kac, functionals, kato, processes, serialize, spectral

__all__ = [
    "envelopes",
    "errors",
    "feynman_kac",
    "functionals",
    "kato",
    "processes",
    "serialize",
    "spectral",
    "__version__",
]
