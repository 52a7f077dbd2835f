"""Nearest-neighbor search with spherical locality-sensitive filters.

Submodules: ``instances`` (planted random and clustered data), ``caps``
(Gaussian cap probabilities), ``filter_tree`` (the filter-tree index),
``reduction`` (decision tree for arbitrary point sets), ``bounds``
(trade-off curves and hypercube expansion tools) and ``harness``
(experiment sweeps and CSV output).
"""
from . import bounds, caps, filter_tree, harness, instances, reduction

__all__ = ["bounds", "caps", "filter_tree", "harness", "instances", "reduction"]
__version__ = "0.1.0"
