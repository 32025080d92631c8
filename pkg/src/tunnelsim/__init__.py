"""Packet-level simulator for the 6to4, Teredo and ISATAP IPv6 transition tunnels."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
