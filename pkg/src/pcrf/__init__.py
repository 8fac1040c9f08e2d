"""Multi-label typing with a low-rank pairwise CRF head.

Unary scores propose types for a mention; a pairwise head couples the
type decisions through damped mean-field updates that cost O(N R) per
iteration and train end to end by backprop through the unrolled updates.
"""

__version__ = "0.1.0"
