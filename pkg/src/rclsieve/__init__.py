"""Noise-robust contrastive training for dense retrieval.

Confidence-regularized NCE loss, the passage sieve, and a synthetic
false-negative laboratory built on linear dual encoders.
"""

__version__ = "0.1.0"
