"""Gated slot attention kernels, a toy model stack and MQAR training on numpy."""

__version__ = "0.1.0"
