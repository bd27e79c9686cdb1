"""Distill lab: normalized and self-distillation losses on tiny networks."""

__version__ = "0.1.0"
