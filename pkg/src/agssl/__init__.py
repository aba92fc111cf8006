"""Multi-teacher knowledge distillation for graph self-supervised learning.

Train one teacher GCN per pretext task, integrate their softened
per-node predictions under learned simplex weights, and distill the
integrated teacher into a student GCN, with diagnostics for the
supporting theory (monotone approximation gap, distillation-objective
rewriting, expectation-level Cauchy-Schwarz bound).
"""

from . import distill, graphs, integration, nn, pretext, reporting, rng, teachers

__all__ = [
    "distill",
    "graphs",
    "integration",
    "nn",
    "pretext",
    "reporting",
    "rng",
    "teachers",
]

__version__ = "0.1.0"
