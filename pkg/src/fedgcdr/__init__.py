"""Federated graph learning for broader-source cross-domain recommendation.

The package simulates the horizontal-vertical-horizontal pipeline in process:
per-domain federated GAT training, DP-protected in-client knowledge transfer,
attention-based activation on an expanded target graph, fine-tuning, top-K
evaluation, an inversion-attack harness, and exact message accounting.
"""

__version__ = "0.1.0"
