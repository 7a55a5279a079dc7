"""Stochastic optimal control via KL-divergence policy iteration.

Exact KL-duality evaluation, backward soft-value recursions, and the derived
model-free learners (tabular and least-squares), plus the two benchmark
environments and a reproducible experiment harness.
"""

__version__ = "0.1.0"
