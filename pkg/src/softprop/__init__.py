"""Soft-finger simulation, strain-based shape estimation, and downstream control."""

__version__ = "0.1.0"
