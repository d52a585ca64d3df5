"""Drone network design layered on an existing emergency-response system."""

__version__ = "0.1.0"
