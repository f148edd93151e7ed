"""Structural alignment bias toolkit: tool-refusal datasets, attention attribution and rebalancing."""

__version__ = "0.1.0"
