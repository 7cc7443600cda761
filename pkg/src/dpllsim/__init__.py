"""Deterministic simulator and design toolkit for an FPGA digital phase-locked loop."""

__version__ = "0.1.0"
