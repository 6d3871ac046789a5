"""Hierarchical material recognition engine: taxonomy graph, graph-attention
classifier, novel-view renderer, and uncertainty-guided scene probing."""

__version__ = "0.1.0"

from . import dataio, evaluation, hiergat, numerics, probe, renderer, taxonomy

__all__ = [
    "dataio",
    "evaluation",
    "hiergat",
    "numerics",
    "probe",
    "renderer",
    "taxonomy",
    "__version__",
]
