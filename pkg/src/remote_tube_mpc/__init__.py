"""Tube-based tracking MPC for a remote controller over lossy links."""

__version__ = "0.1.0"
