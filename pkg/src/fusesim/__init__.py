"""Desk-scale model of fused prefill/decode attention for hybrid-batched LLM serving."""

__version__ = "0.1.0"
