"""Reversible flow-matching toolkit: pretrain a continuous-time flow, run it
backward as a feature extractor and fine-tune it with a classifier head."""

__version__ = "0.1.0"
