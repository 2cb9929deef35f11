"""Ablation-methodology-aware circuit faithfulness and discovery on small transformers."""

__version__ = "0.1.0"
