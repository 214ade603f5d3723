"""Attention-masking strategies for turning a causal transformer into a contrastive user encoder."""

__version__ = "0.1.0"
