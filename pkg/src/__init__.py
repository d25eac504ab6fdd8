"""Bregman divergence learning with max-affine generators.

Minimal package initialization and metadata.
"""

__version__ = "1.0.0"
__all__ = [
    "cli",
    "core",
    "data",
    "errors",
    "experiment",
    "learn",
    "optim",
    "supervision",
    "tasks",
    "utils",
]
