"""Needle-insertion planning engine and digital-twin execution simulator.

Subpackages cover rigid geometry, CT-like volumes and synthetic phantoms,
system calibration solvers, a 7-DOF arm model with collision checking,
insertion planning with feasibility colormaps, error-metric evaluation,
and a TCP digital-twin service.
"""

__version__ = "0.1.0"
