"""Attention-sink laboratory: small instrumented transformers, sink and collapse metrics,
Jacobian sensitivity and the path-sum over-squashing bound."""

__version__ = "0.1.0"
