"""Learned reward bonuses for UCT planning, trained by policy gradient."""

__version__ = "0.1.0"
