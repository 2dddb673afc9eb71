"""Behavior-consistent modularization and reliability-aware structured pruning
on a self-contained trainable toy transformer."""

__version__ = "0.1.0"
