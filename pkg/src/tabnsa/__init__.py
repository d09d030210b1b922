"""Sparse-attention tabular learner.

Compression, selection and sliding-window attention branches combined by
sigmoid gates, fused with a token/channel mixer block, on top of a small
numpy-based autodiff engine. Includes training loops (AdamW and L-BFGS),
two-stage hyperparameter search, metrics, FLOPs accounting and a CLI.
"""

__version__ = "0.1.0"
