"""Desk-scale audio prompt tuning: a numpy autograd stack, a query-token aligner and a frozen LM."""

__version__ = "0.1.0"
