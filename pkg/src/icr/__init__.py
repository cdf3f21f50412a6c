"""Invariant causal routing over a simulated platform economy."""

__version__ = "0.1.0"
