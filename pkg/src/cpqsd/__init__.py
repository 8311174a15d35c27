"""Subcritical contact process on Z: graphical construction, quasi-stationary
behaviour of the process seen from its rightmost point, and break-point
statistics along the rightmost surviving lineage."""

__version__ = "0.1.0"
