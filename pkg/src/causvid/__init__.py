"""Causal video diffusion with asymmetric distribution-matching distillation,
at desk scale: bidirectional teacher training, few-step block-causal student
distillation, and streaming chunk-by-chunk inference with KV caching."""

__version__ = "0.1.0"
