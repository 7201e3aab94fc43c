"""Fault detection and null-space control allocation recovery for a tiltrotor VTOL."""

__version__ = "0.1.0"
